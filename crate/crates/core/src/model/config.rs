use crate::error::{Error, Result};

/// Shape and switches of the three-branch transformer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Window length (timesteps per window).
    pub w: usize,
    /// Sensor count.
    pub n: usize,
    /// Hidden channels.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub eps_ln: f64,
    /// Feed-forward width is `ff_mult * d`.
    pub ff_mult: usize,
    /// Temporal branch (consumes the temporal state matrix).
    pub temporal: bool,
    /// Spatial branch (consumes the spatial state matrix).
    pub spatial: bool,
}

impl ModelConfig {
    /// Full-size profile: `w=100, d=512, h=8, K=3`.
    pub fn paper(n: usize) -> Self {
        ModelConfig {
            w: 100,
            n,
            d: 512,
            heads: 8,
            layers: 3,
            eps_ln: 1e-5,
            ff_mult: 4,
            temporal: true,
            spatial: true,
        }
    }

    /// CPU-sized profile used by tests and the default CLI run.
    pub fn desk(n: usize) -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            layers: 2,
            ..Self::paper(n)
        }
    }

    pub fn tiny(w: usize, n: usize, d: usize, heads: usize, layers: usize) -> Self {
        ModelConfig {
            w,
            n,
            d,
            heads,
            layers,
            ..Self::paper(n)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 2 || self.n < 2 {
            return Err(Error::Config(format!(
                "window {} and sensor count {} must both be at least 2",
                self.w, self.n
            )));
        }
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("ff_mult must be positive".into()));
        }
        if !(self.eps_ln > 0.0) {
            return Err(Error::Config("eps_ln must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ff_width(&self) -> usize {
        self.ff_mult * self.d
    }

    /// Rows of each branch's input and its encoder input width.
    pub fn branch_dims(&self, branch: Branch) -> (usize, usize) {
        match branch {
            Branch::Series => (self.w, self.n),
            Branch::Temporal => (self.w, self.w),
            Branch::Spatial => (self.n, self.n),
        }
    }

    pub fn branch_enabled(&self, branch: Branch) -> bool {
        match branch {
            Branch::Series => true,
            Branch::Temporal => self.temporal,
            Branch::Spatial => self.spatial,
        }
    }

    /// Number of scalar parameters for this configuration.
    ///
    /// Per enabled branch with encoder input `i` and output `o`
    /// (`o = n` for series and spatial, `o = w` for temporal):
    /// - encoder: `i*d + d + 2*(d*d + d)`
    /// - each layer: `4*d*d + d` (Q, K, V, output projection + bias),
    ///   `2*d*f + f + d` (feed-forward, `f = ff_mult*d`), `4*d` (two norms)
    /// - output head: `d*o + o`
    pub fn parameter_count(&self) -> usize {
        let d = self.d;
        let f = self.ff_width();
        Branch::ALL
            .iter()
            .filter(|b| self.branch_enabled(**b))
            .map(|&b| {
                let (_, i) = self.branch_dims(b);
                let o = i;
                let encoder = i * d + d + 2 * (d * d + d);
                let layer = 4 * d * d + d + 2 * d * f + f + d + 4 * d;
                let head = d * o + o;
                encoder + self.layers * layer + head
            })
            .sum()
    }
}

/// The three attention branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Series,
    Temporal,
    Spatial,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Series, Branch::Temporal, Branch::Spatial];

    pub fn index(self) -> usize {
        match self {
            Branch::Series => 0,
            Branch::Temporal => 1,
            Branch::Spatial => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Branch::Series => "x",
            Branch::Temporal => "tm",
            Branch::Spatial => "sm",
        }
    }
}
