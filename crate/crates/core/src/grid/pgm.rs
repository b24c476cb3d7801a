use std::io::{self, Write};

use super::GridDistribution;

/// 8-bit grayscale heat map; the densest cell maps to 255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PgmImage {
    pub fn from_distribution(d: &GridDistribution) -> Self {
        let max = d.max_density();
        let pixels = d
            .densities()
            .iter()
            .map(|&p| if max > 0.0 { (p / max * 255.0).round() as u8 } else { 0 })
            .collect();
        Self {
            width: d.width(),
            height: d.height(),
            pixels,
        }
    }

    /// Binary (P5) encoding, rows top to bottom in grid row order.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn write_pgm(d: &GridDistribution, mut out: impl Write) -> io::Result<()> {
    out.write_all(&PgmImage::from_distribution(d).encode())
}
