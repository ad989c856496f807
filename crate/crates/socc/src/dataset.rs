//! Dataset roots on disk: `dataset.cfg`, `index.txt` and
//! `frames/<id>.{ppm,spcl,sogt,calib,sfmp}`.

use std::fs;
use std::path::{Path, PathBuf};

use socc_core::coords::{voxelize, FusedPoint};
use socc_core::fusion::{fuse, fused_width, CameraCalib, FeatureMap, Image, LidarPoint};
use socc_core::{GridSpec, OccupancyGrid, SparseTensor};

use crate::config::{DatasetConfig, KeyValues};
use crate::error::{Error, Result};
use crate::formats::*;
use crate::synth::SynthFrame;

/// File locations of one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub id: String,
    pub split: String,
    pub image: PathBuf,
    pub points: PathBuf,
    pub calib: PathBuf,
    pub gt: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

impl FrameRecord {
    fn at(root: &Path, id: &str, split: &str) -> Self {
        let f = |ext: &str| root.join("frames").join(format!("{id}.{ext}"));
        let opt = |p: PathBuf| p.exists().then_some(p);
        Self {
            id: id.into(),
            split: split.into(),
            image: f("ppm"),
            points: f("spcl"),
            calib: f("calib"),
            gt: opt(f("sogt")),
            features: opt(f("sfmp")),
        }
    }
}

/// A loaded frame. Scan intensities are raw sensor values.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub image: Image,
    pub calib: CameraCalib,
    pub scan: Vec<LidarPoint>,
    pub gt: Option<OccupancyGrid>,
    pub feature_maps: Vec<FeatureMap>,
}

impl Frame {
    pub fn from_synth(id: &str, f: SynthFrame) -> Self {
        Self { id: id.into(), image: f.image, calib: f.calib, scan: f.scan, gt: Some(f.gt), feature_maps: f.feature_maps }
    }

    /// Normalized-intensity fused points in the grid frame.
    pub fn fused(&self, intensity_max: f64, with_maps: bool) -> Result<Vec<FusedPoint>> {
        let scan: Vec<LidarPoint> = self
            .scan
            .iter()
            .map(|p| LidarPoint { position: p.position, intensity: (p.intensity / intensity_max).clamp(0.0, 1.0) })
            .collect();
        let maps = (with_maps && !self.feature_maps.is_empty()).then_some(self.feature_maps.as_slice());
        Ok(fuse(&scan, &self.image, maps, &self.calib)?)
    }

    /// Fused and voxelized network input at batch index 0.
    pub fn input(&self, cfg: &DatasetConfig, with_maps: bool) -> Result<SparseTensor<f32>> {
        let pts = self.fused(cfg.intensity_max, with_maps)?;
        let width = if with_maps { fused_width(&self.feature_maps) } else { 4 };
        if pts.is_empty() {
            return Ok(SparseTensor::empty(1, width));
        }
        Ok(voxelize(&pts, &cfg.grid, 0)?)
    }

    pub fn save(&self, root: &Path, config: &DatasetConfig) -> Result<()> {
        let rec = FrameRecord::at(root, &self.id, "");
        write_bytes(&rec.image, &encode_ppm(&self.image))?;
        write_bytes(&rec.points, &encode_spcl(&self.scan))?;
        write_bytes(&rec.calib, encode_calib(&self.calib).as_bytes())?;
        if let Some(gt) = &self.gt {
            if gt.dims() != config.grid.dims {
                return Err(Error::data(format!("frame {} grid {:?} does not match dataset grid {:?}", self.id, gt.dims(), config.grid.dims)));
            }
            write_bytes(&root.join("frames").join(format!("{}.sogt", self.id)), &encode_sogt(gt))?;
        }
        if !self.feature_maps.is_empty() {
            write_bytes(&root.join("frames").join(format!("{}.sfmp", self.id)), &encode_sfmp(&self.feature_maps))?;
        }
        Ok(())
    }
}

pub fn load_frame(rec: &FrameRecord, grid: &GridSpec) -> Result<Frame> {
    let image = read_ppm(&rec.image)?;
    let calib = read_calib(&rec.calib)?;
    if (image.width, image.height) != (calib.width, calib.height) {
        return Err(Error::data(format!("frame {}: image size disagrees with calibration", rec.id)));
    }
    let gt = match &rec.gt {
        Some(p) => {
            let g = read_sogt(p)?;
            if g.dims() != grid.dims {
                return Err(Error::data(format!("{}: grid {:?} does not match dataset grid {:?}", p.display(), g.dims(), grid.dims)));
            }
            Some(g)
        }
        None => None,
    };
    let feature_maps = match &rec.features {
        Some(p) => read_sfmp(p)?,
        None => Vec::new(),
    };
    Ok(Frame { id: rec.id.clone(), image, calib, scan: read_spcl(&rec.points)?, gt, feature_maps })
}

/// Anything that can hand out frames by index; real-dataset adapters
/// implement this.
pub trait FrameSource {
    fn config(&self) -> &DatasetConfig;
    fn len(&self) -> usize;
    fn record(&self, i: usize) -> &FrameRecord;
    fn load(&self, i: usize) -> Result<Frame>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices of frames tagged `split`, in iteration order.
    fn split(&self, split: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.record(i).split == split).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub config: DatasetConfig,
    pub records: Vec<FrameRecord>,
}

impl Dataset {
    /// Reads the index and validates that every frame parses.
    ///
    /// `index.txt` holds `<id> [split]` lines (split defaults to `train`).
    /// Without an index, every `frames/*.spcl` becomes a training frame.
    /// Records are ordered by id.
    pub fn open(root: &Path) -> Result<Self> {
        let cfg_path = root.join("dataset.cfg");
        let config = if cfg_path.exists() { DatasetConfig::from_kv(&KeyValues::read(&cfg_path)?)? } else { DatasetConfig::default() };
        let index = root.join("index.txt");
        let mut entries: Vec<(String, String)> = Vec::new();
        if index.exists() {
            let text = String::from_utf8(read_bytes(&index)?).map_err(|_| Error::data(format!("{} is not UTF-8", index.display())))?;
            for line in text.lines() {
                let mut parts = line.split_whitespace();
                let Some(id) = parts.next() else { continue };
                if id.starts_with('#') {
                    continue;
                }
                entries.push((id.to_string(), parts.next().unwrap_or("train").to_string()));
            }
        } else if root.join("frames").is_dir() {
            let dir = root.join("frames");
            for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let p = e.map_err(|e| Error::io(&dir, e))?.path();
                if p.extension().is_some_and(|x| x == "spcl") {
                    if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                        entries.push((stem.to_string(), "train".into()));
                    }
                }
            }
        } else if !root.is_dir() {
            return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
        }
        entries.sort();
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::data(format!("frame id {} listed twice", w[0].0)));
        }
        if entries.is_empty() {
            log::warn!("dataset {} has no frames", root.display());
        }
        let records: Vec<FrameRecord> = entries.iter().map(|(id, split)| FrameRecord::at(root, id, split)).collect();
        for r in &records {
            load_frame(r, &config.grid)?;
        }
        Ok(Self { root: root.to_path_buf(), config, records })
    }

    /// Writes `frames`, `index.txt` and `dataset.cfg` under `root`.
    pub fn write(root: &Path, config: &DatasetConfig, frames: &[(Frame, String)]) -> Result<()> {
        let mut index = String::new();
        for (f, split) in frames {
            f.save(root, config)?;
            index.push_str(&format!("{} {split}\n", f.id));
        }
        write_bytes(&root.join("index.txt"), index.as_bytes())?;
        write_bytes(&root.join("dataset.cfg"), config.to_text().as_bytes())
    }

    /// Feature-map channels of the first frame, 0 when it has none.
    pub fn ext_channels(&self) -> Result<usize> {
        match self.records.first() {
            Some(_) => Ok(self.load(0)?.feature_maps.iter().map(|m| m.channels as usize).sum()),
            None => Ok(0),
        }
    }
}

impl FrameSource for Dataset {
    fn config(&self) -> &DatasetConfig {
        &self.config
    }

    fn len(&self) -> usize {
        self.records.len()
    }

    fn record(&self, i: usize) -> &FrameRecord {
        &self.records[i]
    }

    fn load(&self, i: usize) -> Result<Frame> {
        load_frame(&self.records[i], &self.config.grid)
    }
}
