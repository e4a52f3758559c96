/// Counts scalar multiplications performed inside matrix products.
///
/// Only matmul multiplies are counted; elementwise scaling, softmax and
/// additions are ignored. This is the convention the attention cost formulas
/// are stated in.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    count: u128,
    enabled: bool,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enabled() -> Self {
        OpCounter {
            count: 0,
            enabled: true,
        }
    }

    pub fn enable(&mut self) {
        self.enabled = true;
    }

    pub fn disable(&mut self) {
        self.enabled = false;
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn reset(&mut self) {
        self.count = 0;
    }

    pub fn count(&self) -> u128 {
        self.count
    }

    #[inline]
    pub fn add(&mut self, multiplies: u128) {
        if self.enabled {
            self.count = self.count.saturating_add(multiplies);
        }
    }

    /// Folds in a counter owned by a parallel unit of work.
    pub fn merge(&mut self, other: &OpCounter) {
        self.count = self.count.saturating_add(other.count);
    }
}
