//! FNV-1a 64-bit, used for base-weight immutability checks and checkpoint
//! checksums.

pub(crate) const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub(crate) const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn update_f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.update(&x.to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
