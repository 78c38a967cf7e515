//! IDX ingestion, label utilities and accuracy evaluation.
//!
//! Real images reach the distillation loop only as an [`EvalSet`], which can
//! be built from a test split and nothing else.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::tensor::{one_hot, SeededRng, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `(N, channels, H, W)` in `[−1, 1]` with class labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for images of shape {s:?}",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` items, keeping the split tag.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(self.images.slice_rows(0, n)?, self.labels[..n].to_vec(), self.classes, self.split)
    }

    pub fn select(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.images.select_rows(rows)?, rows.iter().map(|&r| self.labels[r]).collect()))
    }
}

/// A held-out test split, the only form of real data the trainer accepts.
#[derive(Clone, Debug)]
pub struct EvalSet(LabeledDataset);

impl EvalSet {
    pub fn new(data: LabeledDataset) -> Result<Self> {
        if data.split() != Split::Test {
            return Err(Error::InvalidArgument("evaluation data must be a test split".into()));
        }
        Ok(Self(data))
    }

    pub fn dataset(&self) -> &LabeledDataset {
        &self.0
    }
}

fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::IdxFormat(format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxFormat(format!("{what}: truncated header")))
}

/// Parses IDX image and label files (raw or gzip). Pixels map `p ↦ p/127.5 − 1`.
pub fn parse_idx(image_bytes: Vec<u8>, label_bytes: Vec<u8>, split: Split) -> Result<LabeledDataset> {
    let img = maybe_gunzip(image_bytes)?;
    let lab = maybe_gunzip(label_bytes)?;

    let magic = be_u32(&img, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxFormat(format!("images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&img, 4, "images")? as usize;
    let rows = be_u32(&img, 8, "images")? as usize;
    let cols = be_u32(&img, 12, "images")? as usize;
    let want = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::IdxFormat("images: dimensions overflow".into()))?;
    let pixels = &img[16..];
    if pixels.len() != want {
        return Err(Error::IdxFormat(format!("images: payload has {} bytes, header implies {want}", pixels.len())));
    }

    let magic = be_u32(&lab, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxFormat(format!("labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let m = be_u32(&lab, 4, "labels")? as usize;
    let raw_labels = &lab[8..];
    if raw_labels.len() != m {
        return Err(Error::IdxFormat(format!("labels: payload has {} bytes, header says {m}", raw_labels.len())));
    }
    if m != n {
        return Err(Error::IdxFormat(format!("{n} images but {m} labels")));
    }

    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&l| l + 1).max(2);
    let data = pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
    LabeledDataset::new(Tensor::new(&[n, 1, rows, cols], data)?, labels, classes, split)
}

pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::IdxFormat(format!("{}: {e}", p.display())));
    parse_idx(read(images_path)?, read(labels_path)?, split)
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`.
pub fn load_idx_dir(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |stem: String| {
        [stem.clone(), format!("{stem}.gz")]
            .into_iter()
            .map(|name| dir.join(name))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::IdxFormat(format!("{} has no {stem}[.gz]", dir.display())))
    };
    let images = find(format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find(format!("{prefix}-labels-idx1-ubyte"))?;
    load_idx(&images, &labels, split)
}

/// A `(B, C)` batch of one-hot rows together with the class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotBatch {
    pub labels: Vec<usize>,
    pub matrix: Tensor,
}

/// `B/C` rows of each class in shuffled order when `C` divides `B`; otherwise
/// `B` independent uniform draws.
pub fn stratified_one_hot_labels(batch: usize, classes: usize, rng: &mut SeededRng) -> Result<OneHotBatch> {
    if classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    let labels = if batch % classes == 0 {
        let mut l: Vec<usize> = (0..batch).map(|i| i % classes).collect();
        rng.shuffle(&mut l);
        l
    } else {
        (0..batch).map(|_| rng.uniform_class(classes)).collect()
    };
    let matrix = one_hot(&labels, classes)?;
    Ok(OneHotBatch { labels, matrix })
}

/// Top-1 accuracy of `net` over `data`, evaluated in chunks of `batch_size`.
pub fn evaluate_accuracy(net: &Classifier, data: &LabeledDataset, batch_size: usize) -> Result<f32> {
    if net.classes() != data.classes() {
        return Err(Error::InvalidArgument(format!(
            "network has {} classes, dataset {}",
            net.classes(),
            data.classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let step = batch_size.max(1);
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + step).min(data.len());
        let pred = net.predict_labels(&data.images.slice_rows(start, end)?)?;
        correct += pred.iter().zip(&data.labels[start..end]).filter(|(p, l)| p == l).count();
        start = end;
    }
    Ok(correct as f32 / data.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, Module};
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn pixel_map_endpoints() {
        let d = parse_idx(idx_images(1, 2, 2, &[0, 255, 128, 64]), idx_labels(&[3]), Split::Test).unwrap();
        assert_eq!(d.images().shape(), &[1, 1, 2, 2]);
        assert_eq!(d.images().data()[0], -1.0);
        assert_eq!(d.images().data()[1], 1.0);
        assert!(d.images().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(d.labels(), &[3]);
    }

    #[test]
    fn gzip_is_detected() {
        let raw = idx_images(2, 1, 3, &[1, 2, 3, 4, 5, 6]);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        let a = parse_idx(raw, idx_labels(&[0, 1]), Split::Train).unwrap();
        let b = parse_idx(gz, idx_labels(&[0, 1]), Split::Train).unwrap();
        assert_eq!(a.images(), b.images());
    }

    #[test]
    fn format_errors() {
        let img = idx_images(2, 1, 1, &[0, 0]);
        let mut bad_label_magic = idx_labels(&[0, 1]);
        bad_label_magic[3] = 0x03;
        let err = parse_idx(img.clone(), bad_label_magic, Split::Test).unwrap_err();
        assert!(matches!(err, Error::IdxFormat(_)) && err.to_string().contains("magic"));

        assert!(parse_idx(idx_labels(&[0, 1]), idx_labels(&[0, 1]), Split::Test).is_err());
        assert!(parse_idx(idx_images(3, 1, 1, &[0, 0]), idx_labels(&[0, 1]), Split::Test).is_err());
        assert!(parse_idx(img.clone(), idx_labels(&[0, 1, 2]), Split::Test).unwrap_err().to_string().contains("labels"));
        assert!(parse_idx(img[..10].to_vec(), idx_labels(&[0, 1]), Split::Test).is_err());
    }

    #[test]
    fn stratified_labels_balance() {
        let mut rng = SeededRng::new(1, "labels");
        let b = stratified_one_hot_labels(250, 10, &mut rng).unwrap();
        let mut counts = [0; 10];
        for &l in &b.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [25; 10]);
        assert_eq!(b.matrix, one_hot(&b.labels, 10).unwrap());

        let p = stratified_one_hot_labels(10, 10, &mut rng).unwrap();
        let mut sorted = p.labels.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());

        let odd = stratified_one_hot_labels(7, 10, &mut rng).unwrap();
        assert_eq!(odd.matrix.shape(), &[7, 10]);
        for row in odd.matrix.data().chunks(10) {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn stratified_positions_are_uniform() {
        let mut rng = SeededRng::new(2, "labels");
        let (b, c, draws) = (20, 4, 4000);
        let mut at_zero = [0usize; 4];
        for _ in 0..draws {
            at_zero[stratified_one_hot_labels(b, c, &mut rng).unwrap().labels[0]] += 1;
        }
        for n in at_zero {
            let f = n as f64 / draws as f64;
            assert!((f - 0.25).abs() < 0.03, "{at_zero:?}");
        }
    }

    fn tiny_set(labels: Vec<usize>, split: Split) -> LabeledDataset {
        let n = labels.len();
        let mut rng = SeededRng::new(3, "tiny");
        LabeledDataset::new(rng.uniform(&[n, 1, 28, 28], -1.0, 1.0), labels, 10, split).unwrap()
    }

    #[test]
    fn constant_predictor_accuracy() {
        let mut net = Classifier::new(Arch::Mlp, [1, 28, 28], 10, &mut SeededRng::new(4, "init")).unwrap();
        let n = net.params().len();
        for p in &mut net.params_mut()[n - 2..] {
            p.data_mut().fill(0.0);
        }
        // All-zero logits: ties go to class 0.
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let acc = evaluate_accuracy(&net, &tiny_set(labels, Split::Test), 7).unwrap();
        assert!((acc - 0.10).abs() < 1e-6);
    }

    #[test]
    fn class_count_mismatch() {
        let net = Classifier::new(Arch::Mlp, [1, 28, 28], 5, &mut SeededRng::new(5, "init")).unwrap();
        assert!(evaluate_accuracy(&net, &tiny_set(vec![0, 1], Split::Test), 8).is_err());
    }

    #[test]
    fn eval_set_refuses_train_split() {
        assert!(EvalSet::new(tiny_set(vec![1], Split::Train)).is_err());
        assert!(EvalSet::new(tiny_set(vec![1], Split::Test)).is_ok());
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(LabeledDataset::new(Tensor::zeros(&[1, 1, 2, 2]), vec![10], 10, Split::Test).is_err());
    }
}
