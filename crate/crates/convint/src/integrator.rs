//! Placeholder
pub struct ConstructionParams<T> {
    pub _marker: std::marker::PhantomData<T>,
}
