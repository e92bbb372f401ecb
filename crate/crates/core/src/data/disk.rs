//! Directory layout `<root>/<split>/<id>_{rgb,depth,label}.png` plus
//! `<root>/meta.json`. RGB is 8-bit, depth 16-bit, labels 8-bit grayscale.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSplit, Sample};
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub depth_max: f64,
}

pub(super) struct DiskSource {
    entries: Vec<(PathBuf, String)>,
    depth_max: f64,
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

fn expect_format(path: &Path, info: &png::OutputInfo, color: png::ColorType, depth: png::BitDepth) -> Result<()> {
    if info.color_type != color || info.bit_depth != depth {
        return Err(Error::Dataset(format!(
            "{}: expected {color:?}/{depth:?}, found {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    Ok(())
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let fail = |e: png::EncodingError| Error::Dataset(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(data).map_err(fail)?;
    writer.finish().map_err(fail)
}

fn sample_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_rgb.png"))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

impl DiskSource {
    pub(super) fn open(root: &Path) -> Result<(Self, DatasetSplit, Meta)> {
        let meta_path = root.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        if meta.num_classes < 2 || meta.class_names.len() != meta.num_classes || !(meta.depth_max > 0.0) {
            return Err(Error::Dataset(format!("{}: inconsistent meta", meta_path.display())));
        }
        let mut entries = Vec::new();
        let mut split = DatasetSplit {
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            labeled_fraction: 0.0,
        };
        for name in SPLITS {
            let dir = root.join(name);
            for id in sample_ids(&dir)? {
                let index = entries.len();
                let labeled = dir.join(format!("{id}_label.png")).is_file();
                match name {
                    "train" if labeled => split.labeled.push(index),
                    "train" => split.unlabeled.push(index),
                    "val" => split.val.push(index),
                    _ => split.test.push(index),
                }
                entries.push((dir.clone(), id));
            }
        }
        let train = split.labeled.len() + split.unlabeled.len();
        if train > 0 {
            split.labeled_fraction = split.labeled.len() as f64 / train as f64;
        }
        Ok((
            DiskSource {
                entries,
                depth_max: meta.depth_max,
            },
            split,
            meta,
        ))
    }

    pub(super) fn len(&self) -> usize {
        self.entries.len()
    }

    pub(super) fn load(&self, index: usize) -> Result<Sample> {
        let (dir, id) = self
            .entries
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("no sample {index}")))?;
        let rgb_path = dir.join(format!("{id}_rgb.png"));
        let (info, rgb8) = read_png(&rgb_path)?;
        expect_format(&rgb_path, &info, png::ColorType::Rgb, png::BitDepth::Eight)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let mut rgb = vec![0f32; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                rgb[c * h * w + p] = rgb8[p * 3 + c] as f32 / 255.0;
            }
        }
        let depth_path = dir.join(format!("{id}_depth.png"));
        let (dinfo, d16) = read_png(&depth_path)?;
        expect_format(&depth_path, &dinfo, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
        if (dinfo.width as usize, dinfo.height as usize) != (w, h) {
            return Err(Error::Dataset(format!("{id}: depth size differs from rgb size")));
        }
        let depth = d16
            .chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f64 / self.depth_max) as f32)
            .collect();
        let label_path = dir.join(format!("{id}_label.png"));
        let label = if label_path.is_file() {
            let (linfo, l) = read_png(&label_path)?;
            expect_format(&label_path, &linfo, png::ColorType::Grayscale, png::BitDepth::Eight)?;
            if (linfo.width as usize, linfo.height as usize) != (w, h) {
                return Err(Error::Dataset(format!("{id}: label size differs from rgb size")));
            }
            Some(l)
        } else {
            None
        };
        Ok(Sample {
            height: h,
            width: w,
            rgb,
            depth,
            label,
        })
    }
}

pub const DEPTH_MAX: f64 = 65535.0;

/// Write one sample's maps; the label map only if the sample has one.
pub fn write_sample(dir: &Path, id: &str, s: &Sample) -> Result<()> {
    let px = s.height * s.width;
    let q8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut rgb = Vec::with_capacity(3 * px);
    for p in 0..px {
        for c in 0..3 {
            rgb.push(q8(s.rgb[c * px + p]));
        }
    }
    write_png(&dir.join(format!("{id}_rgb.png")), s.width, s.height, png::ColorType::Rgb, png::BitDepth::Eight, &rgb)?;
    let depth: Vec<u8> = s
        .depth
        .iter()
        .flat_map(|&d| (((d.clamp(0.0, 1.0) as f64) * DEPTH_MAX).round() as u16).to_be_bytes())
        .collect();
    write_png(
        &dir.join(format!("{id}_depth.png")),
        s.width,
        s.height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &depth,
    )?;
    if let Some(l) = &s.label {
        write_png(
            &dir.join(format!("{id}_label.png")),
            s.width,
            s.height,
            png::ColorType::Grayscale,
            png::BitDepth::Eight,
            l,
        )?;
    }
    Ok(())
}

fn write_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for id in ids {
        writeln!(f, "{id}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Materialize a dataset in the on-disk layout. Unlabeled training samples
/// get no label file; `train/labeled.txt` and `train/unlabeled.txt` list the
/// two pools.
pub(super) fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let meta = Meta {
        num_classes: ds.num_classes,
        class_names: ds.class_names.clone(),
        depth_max: DEPTH_MAX,
    };
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let meta_path = root.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
    let split = &ds.split;
    let mut train: Vec<usize> = split.labeled.iter().chain(&split.unlabeled).copied().collect();
    train.sort_unstable();
    for (name, indices) in [("train", &train), ("val", &split.val), ("test", &split.test)] {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for &i in indices.iter() {
            let mut s = ds.get(i)?;
            if name == "train" && !split.labeled.contains(&i) {
                s.label = None;
            }
            write_sample(&dir, &sample_id(i), &s)?;
        }
    }
    let ids = |v: &[usize]| v.iter().map(|&i| sample_id(i)).collect::<Vec<_>>();
    write_list(&root.join("train/labeled.txt"), &ids(&split.labeled))?;
    write_list(&root.join("train/unlabeled.txt"), &ids(&split.unlabeled))
}
