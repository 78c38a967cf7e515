//! Run directories, manifests, metrics files and image export.
//!
//! A run directory ends up holding either `manifest.json`, `metrics.csv`,
//! `student.w` and `generator.w`, or `manifest.json`, the metrics of every
//! completed epoch and a `FAILED` marker with the error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GeneratorNet, NormMode};
use crate::tensor::{one_hot, SeededRng, Tensor};
use crate::trainer::{EpochRecord, TrainConfig, METRICS_HEADER};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STUDENT_FILE: &str = "student.w";
pub const GENERATOR_FILE: &str = "generator.w";
pub const FAILED_FILE: &str = "FAILED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSource {
    Local { teacher_weights: PathBuf },
    Remote { url: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub oracle: OracleSource,
    pub eval_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub tool_version: String,
    pub seed: u64,
}

impl RunManifest {
    pub fn new(config: TrainConfig, oracle: OracleSource, eval_data: Option<PathBuf>, out_dir: PathBuf) -> Self {
        let seed = config.seed;
        Self {
            config,
            oracle,
            eval_data,
            out_dir,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.seed != m.config.seed {
            return Err(Error::Config(format!(
                "manifest seed {} disagrees with config seed {}",
                m.seed, m.config.seed
            )));
        }
        Ok(m)
    }
}

/// Appends metric rows as they arrive, flushing after each.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        writeln!(self.out, "{}", record.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Metrics CSV text with the wall-clock column removed, for comparisons
/// between runs.
pub fn metrics_without_seconds(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(i) => &line[..i],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn write_failure(dir: &Path, error: &dyn std::fmt::Display) -> Result<()> {
    fs::write(dir.join(FAILED_FILE), format!("{error}\n"))?;
    Ok(())
}

/// `[−1, 1] ↦ [0, 255]`, rounding to nearest and clamping.
pub fn to_pixel(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Lays `(N, 1, H, W)` images out row-major on a `rows × cols` grid.
/// Missing cells stay black. Returns `(width, height, pixels)`.
pub fn image_grid(images: &Tensor, rows: usize, cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::InvalidArgument(format!("need (N, 1, H, W) grayscale images, got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height];
    for k in 0..n.min(rows * cols) {
        let (gr, gc) = (k / cols, k % cols);
        let img = &images.data()[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                pixels[(gr * h + y) * width + gc * w + x] = to_pixel(img[y * w + x]);
            }
        }
    }
    Ok((width, height, pixels))
}

/// Binary PGM (`P5`, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!("{} pixels for {width}×{height}", pixels.len())));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

/// Renders `rows × cols` samples of a generator. A conditional generator gets
/// class `r mod C` on grid row `r`.
pub fn visualize(generator: &mut GeneratorNet, rows: usize, cols: usize, seed: u64, out: &Path) -> Result<(usize, usize)> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("grid needs at least one row and column".into()));
    }
    let spec = *generator.spec();
    if spec.output[0] != 1 {
        return Err(Error::InvalidArgument("only single-channel generators can be rendered".into()));
    }
    let n = rows * cols;
    let z = SeededRng::new(seed, "visualize").gaussian(&[n, spec.latent_dim]);
    let labels: Vec<usize> = (0..n).map(|k| (k / cols) % spec.classes).collect();
    let y = one_hot(&labels, spec.classes)?;
    let images = generator.generate(&z, spec.conditional.then_some(&y), NormMode::LastBatch)?;
    let (w, h, pixels) = image_grid(&images, rows, cols)?;
    write_pgm(out, w, h, &pixels)?;
    Ok((w, h))
}

/// The generator snapshot inside a run directory, or the file itself.
pub fn generator_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(GENERATOR_FILE)
    } else {
        path.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GeneratorSpec;

    #[test]
    fn pixel_map_endpoints() {
        assert_eq!(to_pixel(-1.0), 0);
        assert_eq!(to_pixel(1.0), 255);
        assert_eq!(to_pixel(0.0), 128);
        assert_eq!(to_pixel(-7.0), 0);
    }

    #[test]
    fn grid_layout() {
        let mut imgs = Tensor::full(&[100, 1, 28, 28], -1.0);
        // Image 11 sits at grid row 1, column 1.
        imgs.data_mut()[11 * 784] = 1.0;
        let (w, h, px) = image_grid(&imgs, 10, 10).unwrap();
        assert_eq!((w, h), (280, 280));
        assert_eq!(px[28 * 280 + 28], 255);
        assert_eq!(px.iter().filter(|&&p| p == 255).count(), 1);
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let mut g = GeneratorNet::build(GeneratorSpec::new([1, 28, 28], 10), &mut SeededRng::new(1, "g")).unwrap();
        assert_eq!(visualize(&mut g, 10, 10, 3, &path).unwrap(), (280, 280));
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n280 280\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 280 * 280);
    }

    #[test]
    fn seconds_column_is_dropped() {
        let csv = format!("{METRICS_HEADER}\n0,1,2,3,4,250,,1.250\n");
        assert_eq!(
            metrics_without_seconds(&csv),
            "epoch,l_ce,l_info,l_gen,l_md,queries_used,test_acc\n0,1,2,3,4,250,"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(
            TrainConfig { seed: 9, ..TrainConfig::default() },
            OracleSource::Remote { url: "http://127.0.0.1:1".into() },
            None,
            dir.path().to_path_buf(),
        );
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    }
}
