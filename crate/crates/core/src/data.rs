//! Datasets: synthetic recovery problems, IDX and CSV image loaders,
//! area-weighted downscaling, seeded splits and one-hot targets.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{FtnError, Result};
use crate::features::{eval_features, FeatureFamily};
use crate::model::TtnParams;
use crate::random::{permutation, seeded, std_normal};
use crate::topology::{BondDims, TreeTopology};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Pixel maximum of the 8x8 digits data.
pub const DIGITS_MAX: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `m x d`.
    pub inputs: Array2<f64>,
    /// `m x n_0`.
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(FtnError::Dimension(format!(
                "{} inputs but {} targets",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self { name: name.into(), inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
        }
    }

    /// Arg-max class of every target row.
    pub fn labels(&self) -> Vec<usize> {
        self.targets
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().fold(0, |b, (i, &v)| if v > r[b] { i } else { b }))
            .collect()
    }
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(FtnError::Format(format!("label {l} out of range for {classes} classes")));
        }
        y[[i, l]] = 1.0;
    }
    Ok(y)
}

/// Recovery problem: inputs uniform on `[-1,1]^d`, targets from a random
/// ground-truth network in the monomial basis of the given degree plus
/// Gaussian noise of variance `noise_var` per output.
#[allow(clippy::too_many_arguments)]
pub fn gen_recovery(
    seed: u64,
    m: usize,
    d: usize,
    degree: usize,
    bond_dims: &BondDims,
    n0: usize,
    noise_var: f64,
) -> Result<(Dataset, TtnParams)> {
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(FtnError::InvalidArgument(format!("noise variance must be >= 0, got {noise_var}")));
    }
    let family = FeatureFamily::Monomial { degree };
    let topo = TreeTopology::build_balanced(&vec![family.dim(); d], n0, bond_dims)?;
    let mut rng = seeded(seed);
    let inputs = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..=1.0));
    let features = eval_features(&family, inputs.view())?;
    let truth = TtnParams::random_init(&topo, &features, seed.wrapping_add(1))?;
    let sd = noise_var.sqrt();
    let mut targets = truth.forward(&features)?;
    targets.mapv_inplace(|v| v + sd * std_normal(&mut rng));
    Ok((Dataset::new("recovery", inputs, targets)?, truth))
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_header(buf: &mut &[u8], magic: u32, ndims: usize, what: &str) -> Result<Vec<usize>> {
    let got = buf.read_u32::<BigEndian>().map_err(|_| FtnError::Format(format!("{what}: truncated header")))?;
    if got != magic {
        return Err(FtnError::Format(format!("{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")));
    }
    (0..ndims)
        .map(|_| {
            buf.read_u32::<BigEndian>()
                .map(|v| v as usize)
                .map_err(|_| FtnError::Format(format!("{what}: truncated header")))
        })
        .collect()
}

/// Parses IDX image and label buffers (uncompressed).
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<(Array2<f64>, Vec<usize>, (usize, usize))> {
    let mut img = images;
    let dims = idx_header(&mut img, IDX_IMAGES_MAGIC, 3, "images")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if img.len() < n * h * w {
        return Err(FtnError::Format(format!("images: truncated, expected {} pixel bytes, found {}", n * h * w, img.len())));
    }
    let mut lab = labels;
    let ldims = idx_header(&mut lab, IDX_LABELS_MAGIC, 1, "labels")?;
    if ldims[0] != n {
        return Err(FtnError::Format(format!("{n} images but {} labels", ldims[0])));
    }
    if lab.len() < n {
        return Err(FtnError::Format("labels: truncated".into()));
    }
    let pixels = Array2::from_shape_fn((n, h * w), |(i, j)| img[i * h * w + j] as f64 / 255.0);
    let labels: Vec<usize> = lab[..n].iter().map(|&l| l as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(FtnError::Format(format!("label {bad} out of range for {classes} classes")));
    }
    Ok((pixels, labels, (h, w)))
}

/// Loads an IDX image/label pair (optionally gzip-compressed) with pixels
/// scaled to `[0,1]` and one-hot targets over 10 classes. Also returns the
/// image height and width.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Dataset, (usize, usize))> {
    let images = open_maybe_gz(images_path)?;
    let labels = open_maybe_gz(labels_path)?;
    let (x, l, hw) = parse_idx(&images, &labels, 10)?;
    let name = images_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((Dataset::new(name, x, one_hot(&l, 10)?)?, hw))
}

/// Writes uncompressed IDX image and label files.
pub fn write_idx<W1: Write, W2: Write>(
    mut images: W1,
    mut labels: W2,
    pixels: &[u8],
    label_values: &[u8],
    h: usize,
    w: usize,
) -> Result<()> {
    let n = label_values.len();
    if pixels.len() != n * h * w {
        return Err(FtnError::Dimension("pixel count does not match labels and image size".into()));
    }
    images.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    for v in [n, h, w] {
        images.write_u32::<BigEndian>(v as u32)?;
    }
    images.write_all(pixels)?;
    labels.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    labels.write_u32::<BigEndian>(n as u32)?;
    labels.write_all(label_values)?;
    Ok(())
}

/// Parses a numeric CSV with integer class labels. A non-numeric first row
/// is treated as a header. Features are divided by `scale_max`.
pub fn parse_csv<R: Read>(reader: R, label_column: Option<usize>, scale_max: f64, classes: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| FtnError::Format(format!("csv: {e}")))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|c| c.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if line == 0 => continue,
            Err(_) => return Err(FtnError::Format(format!("csv line {}: non-numeric cell", line + 1))),
        };
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(FtnError::Format(format!("csv line {}: {} cells, expected {w}", line + 1, row.len())))
            }
            _ => {}
        }
        rows.push(row);
    }
    let width = width.ok_or_else(|| FtnError::Format("csv: no data rows".into()))?;
    if width < 2 {
        return Err(FtnError::Format("csv: need at least one feature and a label".into()));
    }
    let lc = label_column.unwrap_or(width - 1);
    if lc >= width {
        return Err(FtnError::InvalidArgument(format!("label column {lc} out of range")));
    }
    let mut inputs = Array2::zeros((rows.len(), width - 1));
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let l = row[lc];
        if l < 0.0 || l.fract() != 0.0 {
            return Err(FtnError::Format(format!("csv row {}: label {l} is not a class index", i + 1)));
        }
        labels.push(l as usize);
        for (j, &v) in row.iter().enumerate().filter(|&(j, _)| j != lc).map(|(j, v)| (if j > lc { j - 1 } else { j }, v)) {
            inputs[[i, j]] = v / scale_max;
        }
    }
    Dataset::new("csv", inputs, one_hot(&labels, classes)?)
}

pub fn load_csv(path: &Path, label_column: Option<usize>, scale_max: f64, classes: usize) -> Result<Dataset> {
    let mut ds = parse_csv(BufReader::new(File::open(path)?), label_column, scale_max, classes)?;
    ds.name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(ds)
}

/// `target x source` averaging weights: row `i` spreads over the source
/// cells overlapping `[i, i+1) * source/target` with their overlap lengths.
fn area_weights(source: usize, target: usize) -> Array2<f64> {
    let ratio = source as f64 / target as f64;
    Array2::from_shape_fn((target, source), |(i, j)| {
        let (a, b) = (i as f64 * ratio, (i + 1) as f64 * ratio);
        let overlap = (b.min((j + 1) as f64) - a.max(j as f64)).max(0.0);
        overlap / ratio
    })
}

/// Area-weighted resampling of row-major `h x w` images to
/// `target x target`.
pub fn downscale(images: &Array2<f64>, h: usize, w: usize, target: usize) -> Result<Array2<f64>> {
    if images.ncols() != h * w {
        return Err(FtnError::Dimension(format!("images have {} pixels, expected {h}x{w}", images.ncols())));
    }
    if target == 0 || target > h || target > w {
        return Err(FtnError::InvalidArgument(format!("cannot downscale {h}x{w} to {target}x{target}")));
    }
    let wr = area_weights(h, target);
    let wc = area_weights(w, target);
    let rows: Vec<Array2<f64>> = (0..images.nrows())
        .into_par_iter()
        .map(|i| {
            let img = images.row(i).into_shape_with_order((h, w)).expect("row-major image");
            wr.dot(&img).dot(&wc.t())
        })
        .collect();
    let mut out = Array2::zeros((images.nrows(), target * target));
    for (mut o, small) in out.rows_mut().into_iter().zip(rows) {
        o.assign(&small.into_shape_with_order(target * target).expect("contiguous"));
    }
    Ok(out)
}

/// Hierarchical 2D leaf order for a `side x side` image (`side` a power of
/// two): consecutive pairs are horizontal neighbours, pairs of pairs form
/// 2x2 blocks, then 4x2, 4x4 and so on (Morton order). Entry `k` is the
/// row-major pixel placed at leaf `k`.
pub fn block_order(side: usize) -> Result<Vec<usize>> {
    if side == 0 || !side.is_power_of_two() {
        return Err(FtnError::InvalidArgument(format!("block order needs a power-of-two side, got {side}")));
    }
    let bits = side.trailing_zeros();
    Ok((0..side * side)
        .map(|k| {
            let (mut row, mut col) = (0, 0);
            for b in 0..bits {
                col |= ((k >> (2 * b)) & 1) << b;
                row |= ((k >> (2 * b + 1)) & 1) << b;
            }
            row * side + col
        })
        .collect())
}

/// Seeded random split: the first `floor(fraction * m)` permuted rows train.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(FtnError::InvalidArgument(format!("train fraction must be in (0,1), got {train_fraction}")));
    }
    let perm = permutation(dataset.len(), &mut seeded(seed));
    let cut = (train_fraction * dataset.len() as f64).floor() as usize;
    Ok((dataset.select(&perm[..cut]), dataset.select(&perm[cut..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn idx_round_trip() {
        let pixels: Vec<u8> = (0..2 * 3 * 2).map(|v| (v * 20) as u8).collect();
        let labels = [7u8, 2];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_idx(&mut a, &mut b, &pixels, &labels, 3, 2).unwrap();
        let (x, l, hw) = parse_idx(&a, &b, 10).unwrap();
        assert_eq!(hw, (3, 2));
        assert_eq!(l, vec![7, 2]);
        let back: Vec<u8> = x.iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
    }

    #[test]
    fn idx_errors() {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_idx(&mut a, &mut b, &[255, 0], &[3], 1, 2).unwrap();
        let (x, _, _) = parse_idx(&a, &b, 10).unwrap();
        assert_eq!(x[[0, 0]], 1.0);
        let mut bad = a.clone();
        bad[3] = 0x02;
        assert!(matches!(parse_idx(&bad, &b, 10), Err(FtnError::Format(_))));
        assert!(matches!(parse_idx(&a[..a.len() - 1], &b, 10), Err(FtnError::Format(_))));
        assert!(matches!(parse_idx(&a, &b, 3), Err(FtnError::Format(_))));
        assert!(matches!(parse_idx(&a, &b[..6], 10), Err(FtnError::Format(_))));
    }

    #[test]
    fn csv_parsing() {
        let header: Vec<String> = (0..64).map(|i| format!("p{i}")).chain(["label".to_string()]).collect();
        let mut text = header.join(",") + "\n";
        for (v, l) in [(16, 3), (0, 0), (8, 9)] {
            let row: Vec<String> = std::iter::repeat_n(v.to_string(), 64).chain([l.to_string()]).collect();
            text += &(row.join(",") + "\n");
        }
        let ds = parse_csv(text.as_bytes(), None, DIGITS_MAX, 10).unwrap();
        assert_eq!(ds.inputs.dim(), (3, 64));
        assert!(ds.inputs.row(0).iter().all(|&v| v == 1.0));
        assert!(ds.inputs.row(2).iter().all(|&v| v == 0.5));
        assert_eq!(ds.labels(), vec![3, 0, 9]);

        assert!(parse_csv("1,2,0\n1,x,1\n".as_bytes(), None, 1.0, 2).is_err());
        assert!(parse_csv("1,2,0\n1,1\n".as_bytes(), None, 1.0, 2).is_err());
        let ds = parse_csv("1,5,2\n0,6,4\n".as_bytes(), Some(0), 2.0, 2).unwrap();
        assert_eq!(ds.inputs, ndarray::array![[2.5, 1.0], [3.0, 2.0]]);
        assert_eq!(ds.labels(), vec![1, 0]);
    }

    #[test]
    fn downscale_properties() {
        let c = Array2::from_elem((2, 28 * 28), 0.37);
        let out = downscale(&c, 28, 28, 16).unwrap();
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-15));

        let sq = ndarray::array![[0.1, 0.2, 0.3, 0.8]];
        assert_abs_diff_eq!(downscale(&sq, 2, 2, 1).unwrap()[[0, 0]], 0.35, epsilon = 1e-15);

        let mut rng = seeded(1);
        let img = Array2::from_shape_fn((3, 28 * 28), |_| rng.gen_range(0.0..1.0));
        let out = downscale(&img, 28, 28, 16).unwrap();
        for (a, b) in img.rows().into_iter().zip(out.rows()) {
            assert_abs_diff_eq!(a.mean().unwrap(), b.mean().unwrap(), epsilon = 1e-12);
        }
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(downscale(&img, 28, 28, 29).is_err());
    }

    #[test]
    fn split_partition() {
        let ds = Dataset::new("t", Array2::from_shape_fn((10, 1), |(i, _)| i as f64), Array2::zeros((10, 1))).unwrap();
        let (a, b) = split(&ds, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, _) = split(&ds, 0.8, 3).unwrap();
        assert_eq!(a, a2);
        let mut all: Vec<f64> = a.inputs.iter().chain(b.inputs.iter()).copied().collect();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        assert!(split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn recovery_generation() {
        let (ds, truth) = gen_recovery(5, 64, 4, 2, &BondDims::PerNode(vec![5, 5]), 3, 0.0).unwrap();
        let f = truth.forward(&eval_features(&FeatureFamily::Monomial { degree: 2 }, ds.inputs.view()).unwrap()).unwrap();
        assert_eq!(f, ds.targets);
        assert!(ds.inputs.iter().all(|v| (-1.0..=1.0).contains(v)));
        let (a, _) = gen_recovery(5, 64, 4, 2, &BondDims::PerNode(vec![5, 5]), 3, 2.5e-3).unwrap();
        let (b, _) = gen_recovery(5, 64, 4, 2, &BondDims::PerNode(vec![5, 5]), 3, 2.5e-3).unwrap();
        assert_eq!(a, b);

        let (noisy, _) = gen_recovery(6, 4000, 4, 2, &BondDims::Uniform(3), 3, 2.5e-3).unwrap();
        let (clean, _) = gen_recovery(6, 4000, 4, 2, &BondDims::Uniform(3), 3, 0.0).unwrap();
        let diff = &noisy.targets - &clean.targets;
        let var = diff.mapv(|v| v * v).mean().unwrap();
        assert!((var / 2.5e-3 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn block_order_groups_neighbours() {
        assert_eq!(block_order(2).unwrap(), vec![0, 1, 2, 3]);
        let o = block_order(4).unwrap();
        assert_eq!(&o[..8], &[0, 1, 4, 5, 2, 3, 6, 7]);
        let mut sorted = block_order(16).unwrap();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..256).collect::<Vec<_>>());
        assert!(block_order(6).is_err());
    }

    #[test]
    fn one_hot_rows() {
        let y = one_hot(&[2, 0], 3).unwrap();
        assert_eq!(y, ndarray::array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        assert!(one_hot(&[3], 3).is_err());
    }
}
