//! On-disk dataset layout.
//!
//! ```text
//! manifest.txt      boxboot-dataset v1 n=<N> w=<W> h=<H> classes=<C>
//!                   <id> <pp|bb> <train|val>      (one line per image)
//! img_<id>.ppm      binary P6, maxval 255
//! mask_<id>.pgm     binary P5, sample = class id
//! boxes_<id>.csv    class,x0,y0,x1,y1 (inclusive)
//! checksums.txt     <sha256>  <file name>         (every file above)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::netpbm::{decode, encode_pgm, encode_ppm};
use crate::data::{BoxLabel, Dataset, DatasetSplit, Partition, SyntheticScene};
use crate::error::{Error, Result};
use crate::maps::LabelKind;
use crate::tensor::TensorBuf;

pub const MANIFEST: &str = "manifest.txt";
pub const CHECKSUMS: &str = "checksums.txt";
const HEADER_MAGIC: &str = "boxboot-dataset v1";
const BOX_HEADER: &str = "class,x0,y0,x1,y1";

fn img_name(id: usize) -> String {
    format!("img_{id}.ppm")
}

fn mask_name(id: usize) -> String {
    format!("mask_{id}.pgm")
}

fn boxes_name(id: usize) -> String {
    format!("boxes_{id}.csv")
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn to_sample(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `data` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::with_capacity(3 * data.len() + 1);

    let mut manifest = format!(
        "{HEADER_MAGIC} n={} w={} h={} classes={}\n",
        data.len(),
        data.width,
        data.height,
        data.classes
    );
    for i in 0..data.len() {
        let _ = writeln!(manifest, "{i} {} {}", data.split.kinds[i].tag(), data.split.partitions[i].tag());
    }
    files.push((MANIFEST.to_string(), manifest.into_bytes()));

    for (i, scene) in data.scenes.iter().enumerate() {
        let (w, h) = (scene.width(), scene.height());
        let hw = w * h;
        let planes = scene.image.data();
        let rgb: Vec<u8> = (0..hw)
            .flat_map(|p| (0..3).map(move |c| to_sample(planes[c * hw + p])))
            .collect();
        files.push((img_name(i), encode_ppm(w, h, &rgb)));
        files.push((mask_name(i), encode_pgm(w, h, &scene.true_mask)));
        let mut csv = format!("{BOX_HEADER}\n");
        for b in &scene.boxes {
            let _ = writeln!(csv, "{},{},{},{},{}", b.class, b.x0, b.y0, b.x1, b.y1);
        }
        files.push((boxes_name(i), csv.into_bytes()));
    }

    let mut sums = String::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(sums, "{}  {name}", sha256_hex(bytes));
    }
    let path = dir.join(CHECKSUMS);
    fs::write(&path, sums).map_err(|e| Error::io(&path, e))
}

struct Reader<'a> {
    dir: &'a Path,
    sums: BTreeMap<String, String>,
}

impl Reader<'_> {
    /// Reads `name` and checks it against the checksum list.
    fn read(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        match self.sums.get(name) {
            Some(expected) if *expected == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::Checksum { path }),
            None => Err(Error::format(&path, format!("not listed in {CHECKSUMS}"))),
        }
    }

    fn text(&self, name: &str) -> Result<String> {
        let bytes = self.read(name)?;
        String::from_utf8(bytes).map_err(|_| Error::format(self.dir.join(name), "not valid UTF-8 text"))
    }
}

fn header_field(path: &Path, token: Option<&str>, key: &str) -> Result<usize> {
    token
        .and_then(|t| t.strip_prefix(key)?.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, format!("manifest header lacks a valid {key}=<int> field")))
}

/// Loads a dataset written by [`write_dataset`], verifying every checksum.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let sums_path = dir.join(CHECKSUMS);
    let sums_text = fs::read_to_string(&sums_path).map_err(|e| Error::io(&sums_path, e))?;
    let mut sums = BTreeMap::new();
    for (n, line) in sums_text.lines().enumerate() {
        let (hash, name) = line
            .split_once("  ")
            .ok_or_else(|| Error::format(&sums_path, format!("line {}: expected `<sha256>  <name>`", n + 1)))?;
        sums.insert(name.to_string(), hash.to_string());
    }
    let reader = Reader { dir, sums };

    let manifest_path = dir.join(MANIFEST);
    let manifest = reader.text(MANIFEST)?;
    let mut lines = manifest.lines();
    let header = lines.next().unwrap_or_default();
    let rest = header
        .strip_prefix(HEADER_MAGIC)
        .ok_or_else(|| Error::format(&manifest_path, format!("header must start with `{HEADER_MAGIC}`")))?;
    let mut fields = rest.split_whitespace();
    let n = header_field(&manifest_path, fields.next(), "n")?;
    let width = header_field(&manifest_path, fields.next(), "w")?;
    let height = header_field(&manifest_path, fields.next(), "h")?;
    let classes = header_field(&manifest_path, fields.next(), "classes")?;
    if fields.next().is_some() || !(1..=2).contains(&classes) || width == 0 || height == 0 {
        return Err(Error::format(&manifest_path, format!("malformed header `{header}`")));
    }
    let classes = classes as u8;

    let entries: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if entries.len() != n {
        return Err(Error::format(
            &manifest_path,
            format!("header declares n={n} but {} images are listed", entries.len()),
        ));
    }
    let mut split = DatasetSplit {
        kinds: Vec::with_capacity(n),
        partitions: Vec::with_capacity(n),
    };
    for (i, line) in entries.iter().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            [id, kind, part] if id.parse() == Ok(i) => LabelKind::from_tag(kind).zip(Partition::from_tag(part)),
            _ => None,
        };
        let (kind, part) = parsed
            .ok_or_else(|| Error::format(&manifest_path, format!("bad entry `{line}`, expected `{i} <pp|bb> <train|val>`")))?;
        split.kinds.push(kind);
        split.partitions.push(part);
    }

    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        scenes.push(read_scene(&reader, i, width, height, classes)?);
    }
    Ok(Dataset {
        width,
        height,
        classes,
        scenes,
        split,
    })
}

fn read_scene(reader: &Reader, id: usize, width: usize, height: usize, classes: u8) -> Result<SyntheticScene> {
    let hw = width * height;
    let check = |name: &str, channels: usize| -> Result<Vec<u8>> {
        let path = reader.dir.join(name);
        let img = decode(&reader.read(name)?).map_err(|r| Error::format(&path, r))?;
        if (img.width, img.height, img.channels) != (width, height, channels) {
            return Err(Error::format(
                &path,
                format!(
                    "{}x{} with {} channels, manifest says {width}x{height} with {channels}",
                    img.width, img.height, img.channels
                ),
            ));
        }
        Ok(img.samples)
    };

    let rgb = check(&img_name(id), 3)?;
    let mut planes = vec![0.0; 3 * hw];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c * hw + p] = f64::from(px[c]) / 255.0;
        }
    }
    let true_mask = check(&mask_name(id), 1)?;
    if let Some(&bad) = true_mask.iter().find(|&&c| c > classes) {
        return Err(Error::format(reader.dir.join(mask_name(id)), format!("class id {bad} exceeds {classes}")));
    }

    let name = boxes_name(id);
    let path = reader.dir.join(&name);
    let csv = reader.text(&name)?;
    let mut lines = csv.lines();
    if lines.next() != Some(BOX_HEADER) {
        return Err(Error::format(&path, format!("first line must be `{BOX_HEADER}`")));
    }
    let mut boxes = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let v: Vec<usize> = line
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&path, format!("bad row `{line}`")))?;
        let [class, x0, y0, x1, y1] = v[..] else {
            return Err(Error::format(&path, format!("row `{line}` needs 5 fields")));
        };
        if class == 0 || class > classes as usize || x0 > x1 || y0 > y1 || x1 >= width || y1 >= height {
            return Err(Error::format(&path, format!("box `{line}` is out of range")));
        }
        boxes.push(BoxLabel {
            class: class as u8,
            x0,
            y0,
            x1,
            y1,
        });
    }
    Ok(SyntheticScene {
        image: TensorBuf::from_vec([3, height, width], planes)?,
        true_mask,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneConfig;

    fn small() -> Dataset {
        let cfg = SceneConfig { width: 48, height: 40, classes: 2, objects_max: 2, seed: 4, ..Default::default() };
        Dataset::generate(&cfg, 10, 0.25).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = small();
        data.scenes[2].boxes.clear();
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        assert!(back.scenes[2].boxes.is_empty());
        let csv = fs::read_to_string(dir.path().join("boxes_2.csv")).unwrap();
        assert_eq!(csv, "class,x0,y0,x1,y1\n");
    }

    #[test]
    fn manifest_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("boxboot-dataset v1 n=10 w=48 h=40 classes=2"));
        assert_eq!(lines.count(), 10);
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small()).unwrap();
        let mut data = small();
        data.scenes.pop();
        data.split.kinds.pop();
        data.split.partitions.pop();
        // rewrite the manifest with a stale count but a valid checksum
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("n=10", "n=11");
        fs::write(&path, &text).unwrap();
        let sums = fs::read_to_string(dir.path().join(CHECKSUMS)).unwrap();
        let first = sums.lines().next().unwrap();
        let fixed = sums.replacen(first, &format!("{}  {MANIFEST}", sha256_hex(text.as_bytes())), 1);
        fs::write(dir.path().join(CHECKSUMS), fixed).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("n=11"), "{err}");
    }

    #[test]
    fn corruption_and_missing_files_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small()).unwrap();
        let img = dir.path().join("img_3.ppm");
        let mut bytes = fs::read(&img).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&img, bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }));
        assert!(err.to_string().contains("img_3.ppm"));

        fs::remove_file(dir.path().join("mask_1.pgm")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("mask_1.pgm"), "{err}");
        assert!(err.is_io());

        let missing = read_dataset(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }
}
