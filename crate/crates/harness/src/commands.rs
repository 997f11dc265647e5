//! The diagnostic subcommands: complexity bench, mask dumps, gradient
//! checks and dataset export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdt_core::decay::{
    decomposed_masks, default_lambdas, fixed_spatial_mask, fused_mask, gate_logits, gates_from_logits, mask_1d,
    mask_memory_footprint, DecayVariant, Direction, Grid, MaskLayout,
};
use sdt_core::gradcheck::suites::{self, Scope};
use sdt_core::gradcheck::InputReport;
use sdt_core::Tensor;
use serde::Serialize;

use crate::data::SyntheticTask;
use crate::error::Failure;

// ---------------------------------------------------------------- bench

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    /// Mask elements per head and batch item.
    pub full_elements: usize,
    pub decomposed_elements: usize,
    pub full_secs: f64,
    pub decomposed_secs: f64,
}

impl BenchRow {
    pub fn element_ratio(&self) -> f64 {
        self.full_elements as f64 / self.decomposed_elements as f64
    }

    pub fn time_ratio(&self) -> f64 {
        self.full_secs / self.decomposed_secs
    }

    /// Single-row or single-column grids store more in decomposed form.
    pub fn no_savings(&self) -> bool {
        self.decomposed_elements >= self.full_elements
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub heads: usize,
    pub head_dim: usize,
    /// Timed repetitions per grid; the fastest is kept.
    pub repeats: usize,
    /// Skip timing grids whose full mask exceeds this many elements.
    pub max_full_elements: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { heads: 4, head_dim: 8, repeats: 3, max_full_elements: 1 << 26, seed: 0 }
    }
}

/// Parses `8`, `16x16` or `1x64`.
pub fn parse_grid(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Config(format!("invalid grid {s:?} (expected N or HxW)"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn fastest(repeats: usize, mut f: impl FnMut() -> Result<(), Failure>) -> Result<f64, Failure> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

fn attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: &Tensor<f64>) -> Result<Tensor<f64>, Failure> {
    let scale = 1.0 / (q.shape()[q.rank() - 1] as f64).sqrt();
    let scores = q.matmul_t(k)?.scale(scale).add(mask)?;
    Ok(scores.softmax_rows().matmul(v)?)
}

/// Mask construction plus attention, full against decomposed, per grid.
pub fn bench(grids: &[(usize, usize)], opts: &BenchOptions) -> Result<Vec<BenchRow>, Failure> {
    let (n, dk) = (opts.heads, opts.head_dim);
    let d = n * dk;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for &(h, w) in grids {
        let grid = Grid::new(h, w)?;
        let l = grid.len();
        let full_elements = mask_memory_footprint(MaskLayout::Full, grid, 1);
        let decomposed_elements = mask_memory_footprint(MaskLayout::Decomposed, grid, 1);
        let x = Tensor::randn(vec![1, h, w, d], 1.0, &mut rng);
        let w_g = Tensor::randn(vec![d, n], 0.3, &mut rng);
        let w_gw = Tensor::randn(vec![d, n], 0.3, &mut rng);
        let q = Tensor::randn(vec![1, n, h, w, dk], 1.0, &mut rng);
        let k = Tensor::randn(vec![1, n, h, w, dk], 1.0, &mut rng);
        let v = Tensor::randn(vec![1, n, h, w, dk], 1.0, &mut rng);

        let (full_secs, decomposed_secs) = if full_elements * n > opts.max_full_elements {
            (f64::NAN, f64::NAN)
        } else {
            let flat = |t: &Tensor<f64>| t.reshape(vec![1, n, l, dk]);
            let (qf, kf, vf) = (flat(&q)?, flat(&k)?, flat(&v)?);
            let full = fastest(opts.repeats, || {
                let gates = gates_from_logits(&gate_logits(&x, &w_g)?)?;
                let mask = fused_mask(&gates, grid, 0.1)?;
                attend(&qf, &kf, &vf, &mask.bias)?;
                Ok(())
            })?;
            let swap = [0, 1, 3, 2, 4];
            let decomposed = fastest(opts.repeats, || {
                let masks = decomposed_masks(&x, &w_g, &w_gw)?;
                let rows = attend(&q, &k, &v, &masks.width)?;
                let (qt, kt, rt) = (q.permute(&swap)?, k.permute(&swap)?, rows.permute(&swap)?);
                attend(&qt, &kt, &rt, &masks.height)?.permute(&swap)?;
                Ok(())
            })?;
            (full, decomposed)
        };
        rows.push(BenchRow { height: h, width: w, heads: n, full_elements, decomposed_elements, full_secs, decomposed_secs });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("height,width,heads,full_elements,decomposed_elements,element_ratio,full_secs,decomposed_secs,time_ratio,note\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.4},{:.6e},{:.6e},{:.4},{}",
            r.height,
            r.width,
            r.heads,
            r.full_elements,
            r.decomposed_elements,
            r.element_ratio(),
            r.full_secs,
            r.decomposed_secs,
            r.time_ratio(),
            if r.no_savings() { "no savings" } else { "" }
        );
    }
    s
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>9} {:>5} {:>12} {:>12} {:>8} {:>11} {:>11} {:>8}\n",
        "grid", "heads", "full/head", "decomp/head", "ratio", "full ms", "decomp ms", "speedup"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>9} {:>5} {:>12} {:>12} {:>8.2} {:>11.3} {:>11.3} {:>8.2}{}",
            format!("{}x{}", r.height, r.width),
            r.heads,
            r.full_elements,
            r.decomposed_elements,
            r.element_ratio(),
            r.full_secs * 1e3,
            r.decomposed_secs * 1e3,
            r.time_ratio(),
            if r.no_savings() { "  no savings" } else { "" }
        );
    }
    s
}

// ------------------------------------------------------------ dump-mask

#[derive(Clone, Debug)]
pub struct DumpOptions {
    pub variant: DecayVariant,
    pub grid: (usize, usize),
    pub batch: usize,
    pub heads: usize,
    pub dim: usize,
    pub alpha: f64,
    /// One rate for every head of the fixed mask; per-head defaults otherwise.
    pub lambda: Option<f64>,
    /// Std of the random gate projection; content dependence needs it nonzero.
    pub gate_std: f64,
    pub seed: u64,
    pub pgm: bool,
}

impl Default for DumpOptions {
    fn default() -> Self {
        Self { variant: DecayVariant::Cag, grid: (4, 4), batch: 1, heads: 2, dim: 8, alpha: 0.1, lambda: None, gate_std: 1.0, seed: 0, pgm: true }
    }
}

/// A dumped matrix with its header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFile {
    pub variant: String,
    pub batch: usize,
    pub head: usize,
    pub height: usize,
    pub width: usize,
    pub alpha: f64,
    /// `[rows, cols]`
    pub matrix: Tensor<f64>,
}

impl MaskFile {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# variant={} B={} N={} H={} W={} alpha={}\n",
            self.variant, self.batch, self.head, self.height, self.width, self.alpha
        );
        let cols = self.matrix.shape()[1];
        for row in self.matrix.data().chunks(cols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let bad = |m: &str| Failure::Runtime(format!("mask file: {m}"));
        let mut lines = text.lines();
        let header = lines.next().and_then(|l| l.strip_prefix("# ")).ok_or_else(|| bad("missing header"))?;
        let mut fields = std::collections::HashMap::new();
        for kv in header.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("malformed header"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("header lacks {k}")));
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(&format!("bad {k}")));
        let mut data = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row = line.split_whitespace().map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("bad value"))?;
            if *cols.get_or_insert(row.len()) != row.len() {
                return Err(bad("ragged rows"));
            }
            data.extend(row);
            rows += 1;
        }
        Ok(Self {
            variant: get("variant")?.to_string(),
            batch: num("B")?,
            head: num("N")?,
            height: num("H")?,
            width: num("W")?,
            alpha: get("alpha")?.parse().map_err(|_| bad("bad alpha"))?,
            matrix: Tensor::new(vec![rows, cols.unwrap_or(0)], data)?,
        })
    }

    /// 8-bit heatmap mapping `[min, 0]` linearly onto `[0, 255]`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (rows, cols) = (self.matrix.shape()[0], self.matrix.shape()[1]);
        let min = self.matrix.data().iter().cloned().fold(0.0, f64::min);
        let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
        out.extend(self.matrix.data().iter().map(|&v| if min < 0.0 { (255.0 * (v - min) / -min).round().clamp(0.0, 255.0) as u8 } else { 255 }));
        out
    }
}

/// File stem for one dumped matrix.
pub fn mask_stem(m: &MaskFile, axis: Option<&str>) -> String {
    match axis {
        None => format!("mask_b{}_n{}", m.batch, m.head),
        Some(a) => format!("mask_b{}_n{}_{a}", m.batch, m.head),
    }
}

fn slices(t: &Tensor<f64>, b: usize, n: usize) -> Tensor<f64> {
    // [B, N, ..., rows_last, cols] -> one [rows, cols] matrix per (b, n)
    let s = t.shape();
    let cols = s[s.len() - 1];
    let per = t.numel() / (s[0] * s[1]);
    let bb = if s[0] == 1 { 0 } else { b };
    let start = (bb * s[1] + n) * per;
    Tensor::new(vec![per / cols, cols], t.data()[start..start + per].to_vec()).expect("slice shape")
}

/// Builds the requested masks; decomposed variants yield `("height", ..)`
/// and `("width", ..)` pairs, stacked one grid line after another.
pub fn build_masks(o: &DumpOptions) -> Result<Vec<(Option<&'static str>, MaskFile)>, Failure> {
    if !(o.alpha > 0.0 && o.alpha <= 1.0) {
        return Err(Failure::Config(format!("alpha must lie in (0, 1], got {}", o.alpha)));
    }
    if o.heads == 0 || o.batch == 0 || o.dim == 0 {
        return Err(Failure::Config("batch, heads and dim must be positive".into()));
    }
    let (h, w) = o.grid;
    let grid = Grid::new(h, w)?;
    let l = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let x = Tensor::randn(vec![o.batch, h, w, o.dim], 1.0, &mut rng);
    let w_g = Tensor::randn(vec![o.dim, o.heads], o.gate_std, &mut rng);
    let w_g2 = Tensor::randn(vec![o.dim, o.heads], o.gate_std, &mut rng);
    let gates = || -> Result<_, Failure> { Ok(gates_from_logits(&gate_logits(&x, &w_g)?)?) };

    let mut stacks: Vec<(Option<&'static str>, Tensor<f64>)> = Vec::new();
    match o.variant {
        DecayVariant::None => stacks.push((None, Tensor::zeros(vec![o.batch, o.heads, l, l]))),
        DecayVariant::Fixed => {
            let lambdas = match o.lambda {
                Some(v) if v > 0.0 => vec![v; o.heads],
                Some(v) => return Err(Failure::Config(format!("lambda must be positive, got {v}"))),
                None => default_lambdas(o.heads),
            };
            stacks.push((None, fixed_spatial_mask(grid, &Tensor::new(vec![o.heads], lambdas)?)?.bias))
        }
        DecayVariant::Cag => stacks.push((None, fused_mask(&gates()?, grid, o.alpha)?.bias)),
        DecayVariant::OneD => stacks.push((None, mask_1d(gates()?.values(), Direction::Forward)?.bias)),
        DecayVariant::Bidirectional => stacks.push((None, mask_1d(gates()?.values(), Direction::Bidirectional)?.bias)),
        DecayVariant::Decomposed => {
            let m = decomposed_masks(&x, &w_g, &w_g2)?;
            stacks.push((Some("height"), m.height));
            stacks.push((Some("width"), m.width));
        }
    }
    let mut out = Vec::new();
    for b in 0..o.batch {
        for n in 0..o.heads {
            for (axis, t) in &stacks {
                out.push((
                    *axis,
                    MaskFile { variant: o.variant.name().to_string(), batch: b, head: n, height: h, width: w, alpha: o.alpha, matrix: slices(t, b, n) },
                ));
            }
        }
    }
    Ok(out)
}

/// Writes every mask as text (and PGM if requested); returns the text paths.
pub fn dump_masks(o: &DumpOptions, dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (axis, m) in build_masks(o)? {
        let stem = mask_stem(&m, axis);
        let path = dir.join(format!("{stem}.txt"));
        fs::write(&path, m.to_text())?;
        if o.pgm {
            fs::write(dir.join(format!("{stem}.pgm")), m.to_pgm())?;
        }
        paths.push(path);
    }
    Ok(paths)
}

// ------------------------------------------------------------ gradcheck

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub scope: Scope,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn offenders(&self) -> Vec<&InputReport> {
        self.inputs.iter().filter(|r| !(r.max_rel_error < self.tolerance)).collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!("scope={} tolerance={:e}\n", self.scope.name(), self.tolerance);
        for r in &self.inputs {
            let flag = if r.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{flag:>4} {:<48} {:.3e}  ({} entries)", r.name, r.max_rel_error, r.checked);
        }
        let _ = writeln!(s, "worst {:.3e}", self.worst());
        s
    }
}

pub fn gradcheck(scope: Scope, seed: u64) -> Result<GradcheckReport, Failure> {
    Ok(GradcheckReport { scope, tolerance: scope.tolerance(), inputs: suites::run(scope, seed)? })
}

// ------------------------------------------------------------- gen-data

#[derive(Serialize)]
struct DataMeta<'a> {
    size: usize,
    num_classes: usize,
    noise: f64,
    min_separation: usize,
    stride: usize,
    samples: usize,
    seed: u64,
    class_counts: &'a [usize],
}

/// Grayscale preview with `[-1, 2]` mapped onto `[0, 255]`.
pub fn image_pgm(pixels: &[f64], size: usize) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (255.0 * (v + 1.0) / 3.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Writes `meta.json`, `labels.csv` and the first `previews` images as PGM.
pub fn gen_data(task: &SyntheticTask, samples: usize, seed: u64, previews: usize, dir: &Path) -> Result<(), Failure> {
    task.validate().map_err(Failure::Config)?;
    fs::create_dir_all(dir)?;
    let d = task.generate(samples, seed);
    let counts = d.class_counts(task.num_classes);
    let meta = DataMeta {
        size: task.size,
        num_classes: task.num_classes,
        noise: task.noise,
        min_separation: task.min_separation,
        stride: task.stride,
        samples,
        seed,
        class_counts: &counts,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    let mut csv = String::from("index,label,a_row,a_col,b_row,b_col\n");
    for (i, (&label, &(a, b))) in d.labels.iter().zip(&d.placements).enumerate() {
        let _ = writeln!(csv, "{i},{label},{},{},{},{}", a.0, a.1, b.0, b.1);
    }
    fs::write(dir.join("labels.csv"), csv)?;
    let per = task.size * task.size;
    for (i, img) in d.images.data().chunks(per).take(previews).enumerate() {
        fs::write(dir.join(format!("sample_{i:04}.pgm")), image_pgm(img, task.size))?;
    }
    Ok(())
}
