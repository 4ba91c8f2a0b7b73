//! Image encoder: patch embedding with learned positions, one
//! self-attention layer, one gated positional self-attention layer, a
//! feed-forward layer, a per-patch FC projection, and an LSTM over the
//! projected patches whose final hidden state is the bag-of-word feature.

use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, LstmCell};
use crate::tensor::{Bound, Graph, ParamStore, TensorRef};

/// Grayscale image, values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Validation(format!(
                "image: {} pixels for {height}x{width}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image: pixel outside [0, 1]".into()));
        }
        Ok(ImageGrid { height, width, pixels })
    }

    /// 8-bit binary PGM (P5), rescaled to [0, 1].
    pub fn from_pgm(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut pos = 0usize;
        let mut fields = Vec::new();
        // header: magic, width, height, maxval; '#' comments allowed
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
        }
        if fields.len() < 4 || fields[0] != "P5" {
            return Err(Error::Parse(format!("{}: not a binary PGM (P5)", path.display())));
        }
        let width: usize = fields[1].parse().map_err(|_| Error::Parse("bad PGM width".into()))?;
        let height: usize = fields[2].parse().map_err(|_| Error::Parse("bad PGM height".into()))?;
        let maxval: usize = fields[3].parse().map_err(|_| Error::Parse("bad PGM maxval".into()))?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Parse(format!("{}: unsupported PGM maxval {maxval}", path.display())));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height;
        if bytes.len() < pos + need {
            return Err(Error::Parse(format!("{}: truncated PGM data", path.display())));
        }
        let pixels: Vec<f64> = bytes[pos..pos + need].iter().map(|&b| b as f64 / maxval as f64).collect();
        ImageGrid::new(height, width, pixels)
    }
}

/// Encoder outputs on the graph: projected patch features and the
/// bag-of-word feature.
pub struct EncoderOutput {
    pub f_embedding: TensorRef,
    pub f_cl: TensorRef,
    pub patch_count: usize,
}

#[derive(Clone, Copy)]
enum GateMode {
    Learned,
    Forced(f64),
}

struct AttnProj {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln: LayerNorm,
}

impl AttnProj {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> Self {
        AttnProj {
            wq: Linear::init(store, rng, &format!("{prefix}.wq"), d, d),
            wk: Linear::init(store, rng, &format!("{prefix}.wk"), d, d),
            wv: Linear::init(store, rng, &format!("{prefix}.wv"), d, d),
            wo: Linear::init(store, rng, &format!("{prefix}.wo"), d, d),
            ln: LayerNorm::init(store, &format!("{prefix}.ln"), d),
        }
    }
}

pub struct VisualEncoder {
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// patch grid extents (rows, cols) the encoder was built for
    pub grid: (usize, usize),
    patch_proj: Linear,
    pos_emb: String,
    sa: AttnProj,
    gpsa: AttnProj,
    gpsa_gates: String,
    gpsa_pos: Vec<String>,
    gpsa_index_map: Vec<usize>,
    ffn1: Linear,
    ffn2: Linear,
    ffn_ln: LayerNorm,
    fc: Linear,
    ife: LstmCell,
}

impl VisualEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        attn_cfg: &AttentionConfig,
        patch_size: usize,
        image_hw: (usize, usize),
        ff_mult: usize,
    ) -> Result<Self> {
        let d = attn_cfg.model_dim;
        let heads = attn_cfg.num_heads;
        let (ih, iw) = image_hw;
        if ih % patch_size != 0 || iw % patch_size != 0 {
            return Err(Error::Config(format!(
                "image {ih}x{iw} not divisible by patch size {patch_size}"
            )));
        }
        let grid = (ih / patch_size, iw / patch_size);
        let p = grid.0 * grid.1;
        let patch_proj = Linear::init(store, rng, &format!("{prefix}.patch"), patch_size * patch_size, d);
        let pos_emb = format!("{prefix}.pos");
        store.insert_uniform(&pos_emb, p, d, 0.1, rng);
        let sa = AttnProj::init(store, rng, &format!("{prefix}.sa"), d);
        let gpsa = AttnProj::init(store, rng, &format!("{prefix}.gpsa"), d);
        let gpsa_gates = format!("{prefix}.gpsa.gates");
        store.insert_const(&gpsa_gates, 1, heads, 0.0);
        // one learned scalar per relative (drow, dcol) offset per head
        let k = (2 * grid.0 - 1) * (2 * grid.1 - 1);
        let gpsa_pos: Vec<String> = (0..heads)
            .map(|h| {
                let name = format!("{prefix}.gpsa.pos{h}");
                store.insert_uniform(&name, 1, k, 0.1, rng);
                name
            })
            .collect();
        let mut gpsa_index_map = Vec::with_capacity(p * p);
        let cols = grid.1;
        for a in 0..p {
            let (ar, ac) = (a / cols, a % cols);
            for b in 0..p {
                let (br, bc) = (b / cols, b % cols);
                let dr = br as isize - ar as isize + (grid.0 as isize - 1);
                let dc = bc as isize - ac as isize + (grid.1 as isize - 1);
                gpsa_index_map.push(dr as usize * (2 * grid.1 - 1) + dc as usize);
            }
        }
        let ffn1 = Linear::init(store, rng, &format!("{prefix}.ffn1"), d, ff_mult * d);
        let ffn2 = Linear::init(store, rng, &format!("{prefix}.ffn2"), ff_mult * d, d);
        let ffn_ln = LayerNorm::init(store, &format!("{prefix}.ffn_ln"), d);
        let fc = Linear::init(store, rng, &format!("{prefix}.fc"), d, d);
        let ife = LstmCell::init(store, rng, &format!("{prefix}.ife"), d, d);
        Ok(VisualEncoder {
            dim: d,
            heads,
            patch_size,
            grid,
            patch_proj,
            pos_emb,
            sa,
            gpsa,
            gpsa_gates,
            gpsa_pos,
            gpsa_index_map,
            ffn1,
            ffn2,
            ffn_ln,
            fc,
            ife,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Non-overlapping patches flattened in raster order, linearly mapped
    /// to the model dimension, plus the learned positional embedding.
    pub fn patch_embed(&self, g: &mut Graph, bound: &Bound, img: &ImageGrid) -> TensorRef {
        let ps = self.patch_size;
        assert_eq!(
            (img.height / ps, img.width / ps),
            self.grid,
            "encoder built for a {:?} patch grid",
            self.grid
        );
        assert!(img.height % ps == 0 && img.width % ps == 0, "image not divisible by patch size");
        let p = self.patch_count();
        let mut rows = Vec::with_capacity(p * ps * ps);
        for gr in 0..self.grid.0 {
            for gc in 0..self.grid.1 {
                for r in 0..ps {
                    let base = (gr * ps + r) * img.width + gc * ps;
                    rows.extend_from_slice(&img.pixels[base..base + ps]);
                }
            }
        }
        let patches = g.constant(rows, p, ps * ps);
        let projected = self.patch_proj.forward(g, bound, patches);
        g.add(projected, bound.id(&self.pos_emb))
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        bound: &Bound,
        proj: &AttnProj,
        x: TensorRef,
        positional: Option<GateMode>,
    ) -> (TensorRef, Vec<TensorRef>) {
        let d = self.dim;
        let n = self.heads;
        let dh = d / n;
        let p = g.dims(x).0;
        let q = proj.wq.forward(g, bound, x);
        let k = proj.wk.forward(g, bound, x);
        let v = proj.wv.forward(g, bound, x);
        let mut heads = Vec::with_capacity(n);
        let mut matrices = Vec::with_capacity(n);
        for h in 0..n {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let content = g.softmax(scaled, 1);
            let attn = match positional {
                None => content,
                Some(mode) => {
                    let table = bound.id(&self.gpsa_pos[h]);
                    let pos_scores = g.gather_table(table, &self.gpsa_index_map, p, p);
                    let pos_attn = g.softmax(pos_scores, 1);
                    let gate = match mode {
                        GateMode::Forced(v) => g.scalar(v),
                        GateMode::Learned => {
                            let gates = bound.id(&self.gpsa_gates);
                            let gh = g.select_element(gates, 0, h);
                            g.sigmoid(gh)
                        }
                    };
                    // (1-g)*content + g*pos == content + g*(pos - content)
                    let diff = g.sub(pos_attn, content);
                    let gated = g.mul_scalar_node(diff, gate);
                    g.add(content, gated)
                }
            };
            matrices.push(attn);
            heads.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&heads);
        let out = proj.wo.forward(g, bound, cat);
        let res = g.add(x, out);
        (proj.ln.forward(g, bound, res), matrices)
    }

    /// Standard self-attention layer (residual + norm).
    pub fn sa_layer(&self, g: &mut Graph, bound: &Bound, x: TensorRef) -> TensorRef {
        self.self_attention(g, bound, &self.sa, x, None).0
    }

    /// Gated positional self-attention: per-head sigmoid gate mixing
    /// content attention with a learned attention over relative patch
    /// offsets. `force_gate` pins every gate (0 reduces exactly to the
    /// plain SA formula on the same projections).
    pub fn gpsa_layer(&self, g: &mut Graph, bound: &Bound, x: TensorRef, force_gate: Option<f64>) -> TensorRef {
        self.gpsa_layer_with_attn(g, bound, x, force_gate).0
    }

    /// GPSA layer that also returns the per-head attention matrices.
    pub fn gpsa_layer_with_attn(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: TensorRef,
        force_gate: Option<f64>,
    ) -> (TensorRef, Vec<TensorRef>) {
        let mode = match force_gate {
            Some(v) => GateMode::Forced(v),
            None => GateMode::Learned,
        };
        self.self_attention(g, bound, &self.gpsa, x, Some(mode))
    }

    /// Plain SA on the GPSA layer's own projections; the gate-zero
    /// reduction target.
    pub fn gpsa_content_only(&self, g: &mut Graph, bound: &Bound, x: TensorRef) -> TensorRef {
        self.self_attention(g, bound, &self.gpsa, x, None).0
    }

    pub fn ffn_layer(&self, g: &mut Graph, bound: &Bound, x: TensorRef) -> TensorRef {
        let h = self.ffn1.forward(g, bound, x);
        let a = g.gelu(h);
        let out = self.ffn2.forward(g, bound, a);
        let res = g.add(x, out);
        self.ffn_ln.forward(g, bound, res)
    }

    /// Per-patch fully connected projection.
    pub fn fc_project(&self, g: &mut Graph, bound: &Bound, x: TensorRef) -> TensorRef {
        self.fc.forward(g, bound, x)
    }

    /// LSTM over the patch rows in raster order; final hidden state is
    /// the bag-of-word feature.
    pub fn ife_bagofwords(&self, g: &mut Graph, bound: &Bound, patches: TensorRef) -> TensorRef {
        let p = g.dims(patches).0;
        assert!(p >= 1, "ife: empty patch sequence");
        let (mut h, mut c) = self.ife.zero_state(g);
        for row in 0..p {
            let x = g.gather_rows(patches, &[row]);
            let (h2, c2) = self.ife.step(g, bound, x, h, c);
            h = h2;
            c = c2;
        }
        h
    }

    /// Full pipeline: patches -> SA -> GPSA -> FFN -> FC, then the IFE
    /// LSTM over the projected features.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, img: &ImageGrid, force_gpsa_gate: Option<f64>) -> EncoderOutput {
        let e = self.patch_embed(g, bound, img);
        let s = self.sa_layer(g, bound, e);
        let p = self.gpsa_layer(g, bound, s, force_gpsa_gate);
        let f = self.ffn_layer(g, bound, p);
        let proj = self.fc_project(g, bound, f);
        let f_cl = self.ife_bagofwords(g, bound, proj);
        EncoderOutput {
            f_embedding: proj,
            f_cl,
            patch_count: self.patch_count(),
        }
    }
}
