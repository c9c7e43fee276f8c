use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::nn::layers::{ConvLayer, Init};
use crate::tensor::Scalar;

/// Negative slope used by every LeakyReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

fn check_channels<T: Scalar, G: Graph<T>>(g: &G, x: &G::Value, expected: usize) -> Result<()> {
    let got = g.shape(x).c;
    if got != expected {
        return Err(Error::ChannelMismatch { expected, got });
    }
    Ok(())
}

/// One conv inside an RFB branch, after the leading 1×1 reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConv {
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl BranchConv {
    pub const fn new(kh: usize, kw: usize, dilation: usize) -> Self {
        BranchConv { kh, kw, dilation }
    }
}

/// Branch layout of a receptive field block. Each branch starts with a 1×1
/// reduction to `c_in / 4` channels followed by the listed convs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RfbLayout(pub Vec<Vec<BranchConv>>);

impl Default for RfbLayout {
    fn default() -> Self {
        let b = BranchConv::new;
        RfbLayout(vec![
            vec![b(3, 3, 1)],
            vec![b(1, 3, 1), b(3, 3, 3)],
            vec![b(3, 1, 1), b(3, 3, 3)],
            vec![b(1, 3, 1), b(3, 1, 1), b(3, 3, 5)],
        ])
    }
}

impl RfbLayout {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidArgument("rfb layout needs at least one branch".into()));
        }
        for conv in self.0.iter().flatten() {
            if conv.kh == 0 || conv.kw == 0 || conv.kh > 3 || conv.kw > 3 || conv.kh % 2 == 0 || conv.kw % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "rfb kernel {}x{} not allowed (odd sizes up to 3 only)",
                    conv.kh, conv.kw
                )));
            }
            if conv.dilation == 0 {
                return Err(Error::InvalidArgument("rfb dilation must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// Receptive field block: parallel small-kernel branches with dilated tails,
/// fused by a 1×1 conv and added to a shortcut.
#[derive(Debug, Clone)]
pub struct Rfb {
    pub c_in: usize,
    pub c_out: usize,
    pub branches: Vec<Vec<ConvLayer>>,
    pub fuse: ConvLayer,
    pub shortcut: Option<ConvLayer>,
    pub scale: f64,
}

impl Rfb {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        layout: &RfbLayout,
        scale: f64,
    ) -> Result<Self> {
        layout.validate()?;
        let inter = (c_in / 4).max(1);
        let mut branches = Vec::with_capacity(layout.0.len());
        for (b, convs) in layout.0.iter().enumerate() {
            let mut layers = vec![ConvLayer::same(
                store,
                init,
                &format!("{name}.branch{b}.conv0"),
                c_in,
                inter,
                (1, 1),
                1,
            )?];
            for (j, conv) in convs.iter().enumerate() {
                layers.push(ConvLayer::same(
                    store,
                    init,
                    &format!("{name}.branch{b}.conv{}", j + 1),
                    inter,
                    inter,
                    (conv.kh, conv.kw),
                    conv.dilation,
                )?);
            }
            branches.push(layers);
        }
        let fuse = ConvLayer::same(
            store,
            init,
            &format!("{name}.fuse"),
            inter * layout.0.len(),
            c_out,
            (1, 1),
            1,
        )?;
        let shortcut = if c_in == c_out {
            None
        } else {
            Some(ConvLayer::same(
                store,
                init,
                &format!("{name}.shortcut"),
                c_in,
                c_out,
                (1, 1),
                1,
            )?)
        };
        Ok(Rfb {
            c_in,
            c_out,
            branches,
            fuse,
            shortcut,
            scale,
        })
    }

    /// Output of a single branch before concatenation. ReLU follows every
    /// conv except the last one.
    pub fn branch_forward<T: Scalar, G: Graph<T>>(
        &self,
        g: &G,
        store: &ParamStore<T>,
        x: &G::Value,
        branch: usize,
    ) -> Result<G::Value> {
        let layers = self
            .branches
            .get(branch)
            .ok_or_else(|| Error::InvalidArgument(format!("no rfb branch {branch}")))?;
        check_channels(g, x, self.c_in)?;
        let mut h = layers[0].forward(g, store, x)?;
        for layer in &layers[1..] {
            h = g.relu(&h);
            h = layer.forward(g, store, &h)?;
        }
        Ok(h)
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        check_channels(g, x, self.c_in)?;
        let outs = (0..self.branches.len())
            .map(|b| self.branch_forward(g, store, x, b))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_channels(&outs)?;
        let fused = self.fuse.forward(g, store, &cat)?;
        let short = match &self.shortcut {
            Some(conv) => conv.forward(g, store, x)?,
            None => x.clone(),
        };
        let sum = g.add(&short, &g.scale(&fused, self.scale))?;
        Ok(g.leaky_relu(&sum, LEAKY_SLOPE))
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.branches
            .iter()
            .flatten()
            .chain(std::iter::once(&self.fuse))
            .chain(self.shortcut.iter())
    }
}

/// Five densely connected 3×3 convs with a scaled residual.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub channels: usize,
    pub growth: usize,
    pub convs: Vec<ConvLayer>,
    pub beta: f64,
}

impl DenseBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        growth: usize,
        beta: f64,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(5);
        for k in 0..5 {
            let c_out = if k == 4 { channels } else { growth };
            convs.push(ConvLayer::same(
                store,
                init,
                &format!("{name}.conv{}", k + 1),
                channels + k * growth,
                c_out,
                (3, 3),
                1,
            )?);
        }
        Ok(DenseBlock {
            channels,
            growth,
            convs,
            beta,
        })
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        check_channels(g, x, self.channels)?;
        let mut feats = vec![x.clone()];
        for (k, conv) in self.convs.iter().enumerate() {
            let input = if k == 0 { x.clone() } else { g.concat_channels(&feats)? };
            check_channels(g, &input, self.channels + k * self.growth)?;
            let out = conv.forward(g, store, &input)?;
            if k == 4 {
                return g.add(x, &g.scale(&out, self.beta));
            }
            feats.push(g.leaky_relu(&out, LEAKY_SLOPE));
        }
        unreachable!("dense block has five convs")
    }
}

/// Three dense blocks inside an outer scaled residual.
#[derive(Debug, Clone)]
pub struct Rrdb {
    pub blocks: Vec<DenseBlock>,
    pub beta: f64,
}

impl Rrdb {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        growth: usize,
        beta: f64,
    ) -> Result<Self> {
        let blocks = (1..=3)
            .map(|i| DenseBlock::new(store, init, &format!("{name}.dense{i}"), channels, growth, beta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Rrdb { blocks, beta })
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(g, store, &h)?;
        }
        g.add(x, &g.scale(&h, self.beta))
    }
}

/// Densely connected receptive field blocks inside a scaled residual.
#[derive(Debug, Clone)]
pub struct Rrfdb {
    pub channels: usize,
    pub growth: usize,
    pub rfbs: Vec<Rfb>,
    pub beta: f64,
}

impl Rrfdb {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
        growth: usize,
        n_rfb: usize,
        layout: &RfbLayout,
        rfb_scale: f64,
        beta: f64,
    ) -> Result<Self> {
        if n_rfb == 0 {
            return Err(Error::InvalidArgument("rrfdb needs at least one rfb".into()));
        }
        let rfbs = (0..n_rfb)
            .map(|k| {
                let c_out = if k + 1 == n_rfb { channels } else { growth };
                Rfb::new(
                    store,
                    init,
                    &format!("{name}.rfb{}", k + 1),
                    channels + k * growth,
                    c_out,
                    layout,
                    rfb_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Rrfdb {
            channels,
            growth,
            rfbs,
            beta,
        })
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        check_channels(g, x, self.channels)?;
        let mut feats = vec![x.clone()];
        let last = self.rfbs.len() - 1;
        for (k, rfb) in self.rfbs.iter().enumerate() {
            let input = if k == 0 { x.clone() } else { g.concat_channels(&feats)? };
            let out = rfb.forward(g, store, &input)?;
            if k == last {
                return g.add(x, &g.scale(&out, self.beta));
            }
            feats.push(out);
        }
        unreachable!("rrfdb has at least one rfb")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleKind {
    /// Nearest-neighbour interpolation.
    Nni,
    /// Sub-pixel convolution.
    Spc,
}

/// Doubles spatial size, optionally followed by an RFB.
#[derive(Debug, Clone)]
pub struct UpsampleStage {
    pub kind: UpsampleKind,
    pub channels: usize,
    pub expand: Option<ConvLayer>,
    pub rfb: Option<Rfb>,
}

impl UpsampleStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        kind: UpsampleKind,
        channels: usize,
        with_rfb: bool,
        layout: &RfbLayout,
        rfb_scale: f64,
    ) -> Result<Self> {
        let expand = match kind {
            UpsampleKind::Nni => None,
            UpsampleKind::Spc => Some(ConvLayer::same(
                store,
                init,
                &format!("{name}.expand"),
                channels,
                4 * channels,
                (3, 3),
                1,
            )?),
        };
        let rfb = if with_rfb {
            Some(Rfb::new(
                store,
                init,
                &format!("{name}.rfb"),
                channels,
                channels,
                layout,
                rfb_scale,
            )?)
        } else {
            None
        };
        Ok(UpsampleStage {
            kind,
            channels,
            expand,
            rfb,
        })
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &G, store: &ParamStore<T>, x: &G::Value) -> Result<G::Value> {
        check_channels(g, x, self.channels)?;
        let up = match &self.expand {
            None => g.nearest_upsample(x, 2)?,
            Some(conv) => {
                let wide = conv.forward(g, store, x)?;
                g.pixel_shuffle(&wide, 2)?
            }
        };
        match &self.rfb {
            Some(rfb) => rfb.forward(g, store, &up),
            None => Ok(up),
        }
    }
}
