use crate::{Error, Result};

/// Spatial sizes through the network for one cubic input size:
/// input, encoder level 1, pooled, encoder level 2, pooled, bottleneck,
/// upsampled, decoder level 2, upsampled, decoder level 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizePlan {
    pub sizes: [usize; 10],
}

impl SizePlan {
    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn enc1(&self) -> usize {
        self.sizes[1]
    }

    pub fn enc2(&self) -> usize {
        self.sizes[3]
    }

    pub fn bottleneck(&self) -> usize {
        self.sizes[5]
    }

    pub fn up2(&self) -> usize {
        self.sizes[6]
    }

    pub fn dec2(&self) -> usize {
        self.sizes[7]
    }

    pub fn up1(&self) -> usize {
        self.sizes[8]
    }

    pub fn dec1(&self) -> usize {
        self.sizes[9]
    }

    /// Output sizes `(high, mid, low)`.
    pub fn outputs(&self) -> (usize, usize, usize) {
        (self.dec1(), self.dec2(), self.bottleneck())
    }

    /// Offset of each output level's first voxel in input coordinates, measured at the
    /// input resolution: `(input - scale * size) / 2` for scales 1, 2 and 4.
    pub fn level_offsets(&self) -> (usize, usize, usize) {
        let n = self.input();
        let (h, m, l) = self.outputs();
        ((n - h) / 2, (n - 2 * m) / 2, (n - 4 * l) / 2)
    }
}

fn conv_pair(n: usize, what: &str) -> Result<usize> {
    if n < 7 {
        return Err(Error::Shape(format!("size {n} at {what} is too small for two valid 3x3x3 convolutions")));
    }
    Ok(n - 4)
}

fn pool(n: usize, what: &str) -> Result<usize> {
    if n % 2 != 0 {
        return Err(Error::Shape(format!("odd size {n} cannot be pooled at {what}")));
    }
    Ok(n / 2)
}

/// Size chain of the encoder/decoder for a cubic input of edge `input`.
pub fn plan_sizes(input: usize) -> Result<SizePlan> {
    let e1 = conv_pair(input, "encoder level 1")?;
    let p1 = pool(e1, "encoder level 1")?;
    let e2 = conv_pair(p1, "encoder level 2")?;
    let p2 = pool(e2, "encoder level 2")?;
    let bott = conv_pair(p2, "bottleneck")?;
    let u2 = 2 * bott;
    let d2 = conv_pair(u2, "decoder level 2")?;
    let u1 = 2 * d2;
    let d1 = conv_pair(u1, "decoder level 1")?;
    // centred crops need an even difference; both hold whenever the pools succeed
    debug_assert!(e2 >= u2 && (e2 - u2) % 2 == 0 && e1 >= u1 && (e1 - u1) % 2 == 0);
    Ok(SizePlan { sizes: [input, e1, p1, e2, p2, bott, u2, d2, u1, d1] })
}
