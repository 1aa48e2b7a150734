/// Tracks live activation units and their high-water mark.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    current: u64,
    peak: u64,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, units: usize) {
        self.current += units as u64;
        self.peak = self.peak.max(self.current);
    }

    pub fn free(&mut self, units: usize) {
        debug_assert!(self.current >= units as u64, "freeing more than is live");
        self.current -= units as u64;
    }

    pub fn current(&self) -> u64 {
        self.current
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_survives_frees() {
        let mut m = MemoryMeter::new();
        m.alloc(4);
        m.alloc(6);
        m.free(6);
        m.alloc(3);
        assert_eq!(m.current(), 7);
        assert_eq!(m.peak(), 10);
    }
}
