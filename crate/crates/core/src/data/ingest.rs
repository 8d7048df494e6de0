//! Archive ingestion: converts the public distribution formats into
//! packed splits plus manifests.
//!
//! Accepted source layouts per dataset: the canonical archive file, a
//! directory containing it, or the extracted directory tree. Tar
//! archives are re-scanned per member (bounded memory); zip members are
//! addressed via the central directory.

use super::packed::PackedWriter;
use super::{
    manifest_path, packed_path, DatasetManifest, DatasetName, NormStats, Split, UNLABELED,
};
use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Expected hex SHA-256 of the source archive file. Verified only
    /// when the source resolves to an archive; mismatch aborts.
    pub expected_archive_sha256: Option<String>,
}

/// Converts one dataset from `source` into packed splits under `out_dir`.
/// Returns the manifests in the order the splits were written.
pub fn ingest(
    name: DatasetName,
    source: &Path,
    out_dir: &Path,
    options: &IngestOptions,
) -> Result<Vec<DatasetManifest>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let src = SourceTree::locate(name, source)?;
    if let Some(expected) = &options.expected_archive_sha256 {
        match &src {
            SourceTree::Archive(path) => {
                let actual = super::sha256_file(path)?;
                if !actual.eq_ignore_ascii_case(expected) {
                    return Err(Error::ChecksumMismatch {
                        path: path.clone(),
                        expected: expected.clone(),
                        actual,
                    });
                }
                log::info!("archive checksum verified: {actual}");
            }
            SourceTree::Extracted(_) => {
                log::warn!("expected_archive_sha256 ignored: source is an extracted directory");
            }
        }
    }
    match name {
        DatasetName::Cifar10 => ingest_cifar10(&src, out_dir),
        DatasetName::Cifar100 => ingest_cifar100(&src, out_dir),
        DatasetName::Stl10 => ingest_stl10(&src, out_dir),
        DatasetName::TinyImagenet => ingest_tiny(&src, out_dir),
    }
}

/// Resolved dataset source: the canonical archive or an extracted tree.
enum SourceTree {
    Archive(PathBuf),
    Extracted(PathBuf),
}

impl SourceTree {
    fn canonical_archive(name: DatasetName) -> &'static str {
        match name {
            DatasetName::Cifar10 => "cifar-10-binary.tar.gz",
            DatasetName::Cifar100 => "cifar-100-binary.tar.gz",
            DatasetName::Stl10 => "stl10_binary.tar.gz",
            DatasetName::TinyImagenet => "tiny-imagenet-200.zip",
        }
    }

    fn locate(name: DatasetName, source: &Path) -> Result<Self> {
        let meta = std::fs::metadata(source).map_err(|e| Error::io(source, e))?;
        if meta.is_file() {
            return Ok(SourceTree::Archive(source.to_path_buf()));
        }
        let candidate = source.join(Self::canonical_archive(name));
        if candidate.is_file() {
            return Ok(SourceTree::Archive(candidate));
        }
        Ok(SourceTree::Extracted(source.to_path_buf()))
    }

    /// Size in bytes of the member whose path ends with `suffix`.
    fn member_size(&self, suffix: &str) -> Result<u64> {
        match self {
            SourceTree::Extracted(root) => {
                let path = find_file(root, suffix)?;
                Ok(std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len())
            }
            SourceTree::Archive(path) if is_zip(path) => {
                with_zip_member(path, suffix, &mut |_, size| Ok(size))
            }
            SourceTree::Archive(path) => {
                let mut found = None;
                scan_tar(path, &mut |entry_path, size, _| {
                    if path_matches(entry_path, suffix) {
                        found = Some(size);
                        Ok(false)
                    } else {
                        Ok(true)
                    }
                })?;
                found.ok_or_else(|| missing_member(path, suffix))
            }
        }
    }

    /// Streams the member's bytes into `sink` in order.
    fn stream_member(&self, suffix: &str, sink: &mut dyn FnMut(&[u8]) -> Result<()>) -> Result<()> {
        match self {
            SourceTree::Extracted(root) => {
                let path = find_file(root, suffix)?;
                let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
                copy_stream(&mut file, &path, sink)
            }
            SourceTree::Archive(path) if is_zip(path) => {
                with_zip_member(path, suffix, &mut |reader, _| {
                    copy_stream(reader, path, sink)
                })
            }
            SourceTree::Archive(path) => {
                let mut found = false;
                scan_tar(path, &mut |entry_path, _, reader| {
                    if path_matches(entry_path, suffix) {
                        found = true;
                        copy_stream(reader, path, sink)?;
                        Ok(false)
                    } else {
                        Ok(true)
                    }
                })?;
                if found {
                    Ok(())
                } else {
                    Err(missing_member(path, suffix))
                }
            }
        }
    }

    /// Reads a small member fully into memory.
    fn read_member(&self, suffix: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.stream_member(suffix, &mut |chunk| {
            buf.extend_from_slice(chunk);
            Ok(())
        })?;
        Ok(buf)
    }

    /// All member paths (relative, forward slashes).
    fn member_paths(&self) -> Result<Vec<String>> {
        match self {
            SourceTree::Extracted(root) => {
                let mut out = Vec::new();
                walk_files(root, root, &mut out)?;
                Ok(out)
            }
            SourceTree::Archive(path) if is_zip(path) => {
                let file = File::open(path).map_err(|e| Error::io(path, e))?;
                let za = zip::ZipArchive::new(file).map_err(|e| Error::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                Ok(za.file_names().map(String::from).collect())
            }
            SourceTree::Archive(path) => {
                let mut out = Vec::new();
                scan_tar(path, &mut |entry_path, _, _| {
                    out.push(entry_path.to_string());
                    Ok(true)
                })?;
                Ok(out)
            }
        }
    }
}

fn is_zip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip"))
}

fn missing_member(archive: &Path, suffix: &str) -> Error {
    Error::Ingest {
        path: archive.to_path_buf(),
        reason: format!("member {suffix:?} not found"),
    }
}

fn path_matches(entry_path: &str, suffix: &str) -> bool {
    let entry = entry_path.trim_end_matches('/');
    entry == suffix
        || entry
            .rsplit('/')
            .next()
            .is_some_and(|base| base == suffix && !suffix.contains('/'))
        || entry.ends_with(&format!("/{suffix}"))
}

/// Visits regular tar members; the callback returns false to stop early.
fn scan_tar(
    path: &Path,
    visit: &mut dyn FnMut(&str, u64, &mut dyn Read) -> Result<bool>,
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let gz = GzDecoder::new(file);
    let mut archive = tar::Archive::new(gz);
    let entries = archive.entries().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let entry_path = entry
            .path()
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_string_lossy()
            .replace('\\', "/");
        let size = entry.size();
        if !visit(&entry_path, size, &mut entry)? {
            return Ok(());
        }
    }
    Ok(())
}

fn with_zip_member<T>(
    path: &Path,
    suffix: &str,
    f: &mut dyn FnMut(&mut dyn Read, u64) -> Result<T>,
) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut za = zip::ZipArchive::new(file).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let name = za
        .file_names()
        .find(|n| path_matches(n, suffix))
        .map(String::from)
        .ok_or_else(|| missing_member(path, suffix))?;
    let mut member = za.by_name(&name).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let size = member.size();
    f(&mut member, size)
}

fn copy_stream(
    reader: &mut dyn Read,
    origin: &Path,
    sink: &mut dyn FnMut(&[u8]) -> Result<()>,
) -> Result<()> {
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(origin, e))?;
        if n == 0 {
            return Ok(());
        }
        sink(&buf[..n])?;
    }
}

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            walk_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

fn find_file(root: &Path, suffix: &str) -> Result<PathBuf> {
    let direct = root.join(suffix);
    if direct.is_file() {
        return Ok(direct);
    }
    let mut paths = Vec::new();
    walk_files(root, root, &mut paths)?;
    for rel in paths {
        if path_matches(&rel, suffix) {
            return Ok(root.join(rel));
        }
    }
    Err(missing_member(root, suffix))
}

/// Accumulates one packed split: histogram, channel statistics, checksum.
struct SplitBuilder {
    writer: PackedWriter,
    name: DatasetName,
    split: Split,
    height: u16,
    width: u16,
    num_classes: usize,
    histogram: Vec<u64>,
    unlabeled: u64,
    next_id: u32,
    sum: [f64; 3],
    sumsq: [f64; 3],
    pixels_per_channel: u64,
    out_dir: PathBuf,
}

impl SplitBuilder {
    fn create(
        out_dir: &Path,
        name: DatasetName,
        split: Split,
        count: u32,
        side: usize,
    ) -> Result<Self> {
        let height = u16::try_from(side).map_err(|_| Error::Config("side too large".into()))?;
        let path = packed_path(out_dir, name, split);
        Ok(SplitBuilder {
            writer: PackedWriter::create(&path, count, height, height)?,
            name,
            split,
            height,
            width: height,
            num_classes: name.num_classes(),
            histogram: vec![0; name.num_classes()],
            unlabeled: 0,
            next_id: 0,
            sum: [0.0; 3],
            sumsq: [0.0; 3],
            pixels_per_channel: 0,
            out_dir: out_dir.to_path_buf(),
        })
    }

    fn push(&mut self, label: i32, pixels: &[u8]) -> Result<()> {
        if label == UNLABELED {
            self.unlabeled += 1;
        } else if label < 0 || label as usize >= self.num_classes {
            return Err(Error::Ingest {
                path: self.out_dir.clone(),
                reason: format!(
                    "label {label} out of range for {} classes in {}/{}",
                    self.num_classes, self.name, self.split
                ),
            });
        } else {
            self.histogram[label as usize] += 1;
        }
        for px in pixels.chunks_exact(3) {
            for (c, &byte) in px.iter().enumerate() {
                let v = f64::from(byte) / 255.0;
                self.sum[c] += v;
                self.sumsq[c] += v * v;
            }
        }
        self.pixels_per_channel += u64::from(self.height) * u64::from(self.width);
        let id = self.next_id;
        self.next_id += 1;
        self.writer.write_record(id, label, pixels)
    }

    fn finish(self) -> Result<DatasetManifest> {
        let sha = self.writer.finish()?;
        let n = self.pixels_per_channel as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = self.sum[c] / n.max(1.0);
            let var = (self.sumsq[c] / n.max(1.0) - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt().max(1e-6);
        }
        let manifest = DatasetManifest {
            format_version: 1,
            name: self.name,
            split: self.split,
            count: u64::from(self.next_id),
            image_height: u32::from(self.height),
            image_width: u32::from(self.width),
            num_classes: self.num_classes as u32,
            class_histogram: self.histogram,
            unlabeled_count: self.unlabeled,
            packed_sha256: sha,
            stats: NormStats { mean, std },
        };
        manifest.save(&manifest_path(&self.out_dir, self.name, self.split))?;
        Ok(manifest)
    }
}

/// Buffers a byte stream and emits fixed-size records.
struct RecordChunker {
    rec_len: usize,
    buf: Vec<u8>,
}

impl RecordChunker {
    fn new(rec_len: usize) -> Self {
        RecordChunker {
            rec_len,
            buf: Vec::with_capacity(rec_len * 2),
        }
    }

    fn push(
        &mut self,
        mut data: &[u8],
        on_record: &mut dyn FnMut(&[u8]) -> Result<()>,
    ) -> Result<()> {
        if !self.buf.is_empty() {
            let need = self.rec_len - self.buf.len();
            let take = need.min(data.len());
            self.buf.extend_from_slice(&data[..take]);
            data = &data[take..];
            if self.buf.len() == self.rec_len {
                let rec = std::mem::take(&mut self.buf);
                on_record(&rec)?;
            }
        }
        while data.len() >= self.rec_len {
            on_record(&data[..self.rec_len])?;
            data = &data[self.rec_len..];
        }
        self.buf.extend_from_slice(data);
        Ok(())
    }

    fn finish(self, origin: &Path) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format {
                path: origin.to_path_buf(),
                reason: format!(
                    "trailing {} bytes do not form a whole {}-byte record",
                    self.buf.len(),
                    self.rec_len
                ),
            })
        }
    }
}

/// Channel-planar (RRR..GGG..BBB, row-major planes) to interleaved HWC.
fn planar_to_hwc(planes: &[u8], side: usize, out: &mut Vec<u8>) {
    let area = side * side;
    out.clear();
    out.reserve(area * 3);
    for i in 0..area {
        out.push(planes[i]);
        out.push(planes[area + i]);
        out.push(planes[2 * area + i]);
    }
}

/// Channel-planar with column-major planes (pixel (y, x) at plane[x*side + y])
/// to interleaved row-major HWC.
fn planar_colmajor_to_hwc(planes: &[u8], side: usize, out: &mut Vec<u8>) {
    let area = side * side;
    out.clear();
    out.resize(area * 3, 0);
    for y in 0..side {
        for x in 0..side {
            let src = x * side + y;
            let dst = (y * side + x) * 3;
            out[dst] = planes[src];
            out[dst + 1] = planes[area + src];
            out[dst + 2] = planes[2 * area + src];
        }
    }
}

fn records_in_member(src: &SourceTree, member: &str, rec_len: usize) -> Result<u64> {
    let size = src.member_size(member)?;
    if size % rec_len as u64 != 0 {
        return Err(Error::Ingest {
            path: PathBuf::from(member),
            reason: format!("size {size} is not a multiple of the {rec_len}-byte record"),
        });
    }
    Ok(size / rec_len as u64)
}

/// Shape of one fixed-size binary record: total byte length, square image
/// side, how many leading bytes hold the label, and whether the pixel
/// planes are stored column-major.
struct RecordLayout {
    rec_len: usize,
    side: usize,
    label_bytes: usize,
    colmajor: bool,
}

/// Streams `member`, parsing fixed-size records with a leading label area,
/// into `builder`. `label_of` maps the record prefix to a label.
fn pump_records(
    src: &SourceTree,
    member: &str,
    layout: &RecordLayout,
    label_of: &mut dyn FnMut(u64, &[u8]) -> Result<i32>,
    builder: &mut SplitBuilder,
) -> Result<()> {
    let mut chunker = RecordChunker::new(layout.rec_len);
    let mut hwc = Vec::new();
    let mut index = 0u64;
    src.stream_member(member, &mut |chunk| {
        chunker.push(chunk, &mut |rec| {
            let label = label_of(index, &rec[..layout.label_bytes])?;
            if layout.colmajor {
                planar_colmajor_to_hwc(&rec[layout.label_bytes..], layout.side, &mut hwc);
            } else {
                planar_to_hwc(&rec[layout.label_bytes..], layout.side, &mut hwc);
            }
            index += 1;
            builder.push(label, &hwc)
        })
    })?;
    chunker.finish(Path::new(member))
}

fn ingest_cifar10(src: &SourceTree, out_dir: &Path) -> Result<Vec<DatasetManifest>> {
    let side = 32;
    let rec_len = 1 + side * side * 3;
    let train_members = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
    ];
    let mut train_count = 0u64;
    for m in &train_members {
        train_count += records_in_member(src, m, rec_len)?;
    }
    let test_count = records_in_member(src, "test_batch.bin", rec_len)?;

    let mut train = SplitBuilder::create(
        out_dir,
        DatasetName::Cifar10,
        Split::Train,
        u32::try_from(train_count).map_err(|_| Error::Config("split too large".into()))?,
        side,
    )?;
    let layout = RecordLayout { rec_len, side, label_bytes: 1, colmajor: false };
    for m in &train_members {
        pump_records(src, m, &layout, &mut |_, head| Ok(i32::from(head[0])), &mut train)?;
    }
    let train_manifest = train.finish()?;

    let mut test = SplitBuilder::create(
        out_dir,
        DatasetName::Cifar10,
        Split::Test,
        u32::try_from(test_count).map_err(|_| Error::Config("split too large".into()))?,
        side,
    )?;
    pump_records(
        src,
        "test_batch.bin",
        &layout,
        &mut |_, head| Ok(i32::from(head[0])),
        &mut test,
    )?;
    let test_manifest = test.finish()?;
    Ok(vec![train_manifest, test_manifest])
}

fn ingest_cifar100(src: &SourceTree, out_dir: &Path) -> Result<Vec<DatasetManifest>> {
    let side = 32;
    // Two label bytes per record: coarse then fine; the fine label is used.
    let rec_len = 2 + side * side * 3;
    let layout = RecordLayout { rec_len, side, label_bytes: 2, colmajor: false };
    let mut out = Vec::new();
    for (member, split) in [("train.bin", Split::Train), ("test.bin", Split::Test)] {
        let count = records_in_member(src, member, rec_len)?;
        let mut builder = SplitBuilder::create(
            out_dir,
            DatasetName::Cifar100,
            split,
            u32::try_from(count).map_err(|_| Error::Config("split too large".into()))?,
            side,
        )?;
        pump_records(src, member, &layout, &mut |_, head| Ok(i32::from(head[1])), &mut builder)?;
        out.push(builder.finish()?);
    }
    Ok(out)
}

fn stl_labels(src: &SourceTree, member: &str) -> Result<Vec<i32>> {
    let raw = src.read_member(member)?;
    raw.iter()
        .map(|&b| {
            if (1..=10).contains(&b) {
                Ok(i32::from(b) - 1)
            } else {
                Err(Error::Ingest {
                    path: PathBuf::from(member),
                    reason: format!("label byte {b} outside 1..=10"),
                })
            }
        })
        .collect()
}

fn ingest_stl10(src: &SourceTree, out_dir: &Path) -> Result<Vec<DatasetManifest>> {
    let side = 96;
    let rec_len = side * side * 3;
    let train_labels = stl_labels(src, "train_y.bin")?;
    let test_labels = stl_labels(src, "test_y.bin")?;
    let train_count = records_in_member(src, "train_X.bin", rec_len)?;
    let test_count = records_in_member(src, "test_X.bin", rec_len)?;
    let unlabeled_count = records_in_member(src, "unlabeled_X.bin", rec_len)?;
    if train_count != train_labels.len() as u64 {
        return Err(Error::Ingest {
            path: PathBuf::from("train_X.bin"),
            reason: format!(
                "{train_count} images but {} labels",
                train_labels.len()
            ),
        });
    }
    if test_count != test_labels.len() as u64 {
        return Err(Error::Ingest {
            path: PathBuf::from("test_X.bin"),
            reason: format!("{test_count} images but {} labels", test_labels.len()),
        });
    }

    let as_u32 = |v: u64| u32::try_from(v).map_err(|_| Error::Config("split too large".into()));
    let layout = RecordLayout { rec_len, side, label_bytes: 0, colmajor: true };

    let mut train = SplitBuilder::create(
        out_dir,
        DatasetName::Stl10,
        Split::Train,
        as_u32(train_count)?,
        side,
    )?;
    pump_records(
        src,
        "train_X.bin",
        &layout,
        &mut |i, _| Ok(train_labels[i as usize]),
        &mut train,
    )?;
    let train_manifest = train.finish()?;

    let mut test = SplitBuilder::create(
        out_dir,
        DatasetName::Stl10,
        Split::Test,
        as_u32(test_count)?,
        side,
    )?;
    pump_records(
        src,
        "test_X.bin",
        &layout,
        &mut |i, _| Ok(test_labels[i as usize]),
        &mut test,
    )?;
    let test_manifest = test.finish()?;

    // Pretraining pool: the labeled training images followed by the
    // unlabeled ones.
    let mut pretrain = SplitBuilder::create(
        out_dir,
        DatasetName::Stl10,
        Split::Pretrain,
        as_u32(train_count + unlabeled_count)?,
        side,
    )?;
    pump_records(
        src,
        "train_X.bin",
        &layout,
        &mut |i, _| Ok(train_labels[i as usize]),
        &mut pretrain,
    )?;
    pump_records(
        src,
        "unlabeled_X.bin",
        &layout,
        &mut |_, _| Ok(UNLABELED),
        &mut pretrain,
    )?;
    let pretrain_manifest = pretrain.finish()?;
    Ok(vec![train_manifest, test_manifest, pretrain_manifest])
}

fn decode_jpeg_64(bytes: &[u8], origin: &str) -> Result<Vec<u8>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Ingest {
            path: PathBuf::from(origin),
            reason: format!("jpeg decode failed: {e}"),
        })?
        .to_rgb8();
    if img.width() != 64 || img.height() != 64 {
        return Err(Error::Ingest {
            path: PathBuf::from(origin),
            reason: format!("expected 64x64, got {}x{}", img.width(), img.height()),
        });
    }
    Ok(img.into_raw())
}

fn ingest_tiny(src: &SourceTree, out_dir: &Path) -> Result<Vec<DatasetManifest>> {
    let wnids_raw = String::from_utf8(src.read_member("wnids.txt")?).map_err(|_| {
        Error::Ingest {
            path: PathBuf::from("wnids.txt"),
            reason: "not utf-8".to_string(),
        }
    })?;
    let mut wnids: Vec<String> = wnids_raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    wnids.sort();
    wnids.dedup();
    if wnids.is_empty() {
        return Err(Error::Ingest {
            path: PathBuf::from("wnids.txt"),
            reason: "no class ids".to_string(),
        });
    }
    let class_of: HashMap<&str, i32> = wnids
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i as i32))
        .collect();

    let paths = src.member_paths()?;
    // Training images live at .../train/{wnid}/images/{file}.JPEG.
    let mut train_files: Vec<(String, i32)> = Vec::new();
    for p in &paths {
        let parts: Vec<&str> = p.split('/').collect();
        if let Some(tpos) = parts.iter().position(|s| *s == "train") {
            if parts.len() >= tpos + 4
                && parts[tpos + 2] == "images"
                && parts[tpos + 3].to_ascii_lowercase().ends_with(".jpeg")
            {
                let wnid = parts[tpos + 1];
                let label = *class_of.get(wnid).ok_or_else(|| Error::Ingest {
                    path: PathBuf::from(p.clone()),
                    reason: format!("directory {wnid} not listed in wnids.txt"),
                })?;
                train_files.push((p.clone(), label));
            }
        }
    }
    train_files.sort();
    if train_files.is_empty() {
        return Err(Error::Ingest {
            path: PathBuf::from("train"),
            reason: "no training images found".to_string(),
        });
    }

    let ann_raw = String::from_utf8(src.read_member("val_annotations.txt")?).map_err(|_| {
        Error::Ingest {
            path: PathBuf::from("val_annotations.txt"),
            reason: "not utf-8".to_string(),
        }
    })?;
    let mut val_files: Vec<(String, i32)> = Vec::new();
    let mut val_label_of: HashMap<String, i32> = HashMap::new();
    for line in ann_raw.lines() {
        let mut cols = line.split_whitespace();
        let (Some(file), Some(wnid)) = (cols.next(), cols.next()) else {
            continue;
        };
        let label = *class_of.get(wnid).ok_or_else(|| Error::Ingest {
            path: PathBuf::from("val_annotations.txt"),
            reason: format!("unknown class id {wnid}"),
        })?;
        val_label_of.insert(file.to_string(), label);
    }
    for p in &paths {
        let parts: Vec<&str> = p.split('/').collect();
        if let Some(vpos) = parts.iter().position(|s| *s == "val") {
            if parts.len() >= vpos + 3
                && parts[vpos + 1] == "images"
                && parts[vpos + 2].to_ascii_lowercase().ends_with(".jpeg")
            {
                let base = parts[vpos + 2];
                let label = *val_label_of.get(base).ok_or_else(|| Error::Ingest {
                    path: PathBuf::from(p.clone()),
                    reason: "image missing from val_annotations.txt".to_string(),
                })?;
                val_files.push((p.clone(), label));
            }
        }
    }
    val_files.sort();
    if val_files.is_empty() {
        return Err(Error::Ingest {
            path: PathBuf::from("val"),
            reason: "no validation images found".to_string(),
        });
    }

    let as_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Config("split too large".into()));
    let mut out = Vec::new();
    for (files, split) in [(&train_files, Split::Train), (&val_files, Split::Test)] {
        let mut builder = SplitBuilder::create(
            out_dir,
            DatasetName::TinyImagenet,
            split,
            as_u32(files.len())?,
            64,
        )?;
        for (path, label) in files.iter() {
            let bytes = src.read_member(path)?;
            let hwc = decode_jpeg_64(&bytes, path)?;
            builder.push(*label, &hwc)?;
        }
        out.push(builder.finish()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{open_split, PackedDataset};
    use flate2::write::GzEncoder;
    use std::io::Write;
    use tempfile::tempdir;

    fn write_targz(path: &Path, members: &[(&str, Vec<u8>)]) {
        let file = File::create(path).unwrap();
        let gz = GzEncoder::new(file, flate2::Compression::fast());
        let mut tar = tar::Builder::new(gz);
        for (name, data) in members {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_cksum();
            tar.append_data(&mut header, name, data.as_slice()).unwrap();
        }
        tar.into_inner().unwrap().finish().unwrap();
    }

    /// CIFAR-style planar record with a recognizable per-pixel pattern.
    fn cifar_record(label: u8, seed: u8) -> Vec<u8> {
        let mut rec = vec![label];
        for c in 0..3u16 {
            for i in 0..1024u16 {
                rec.push(((i + u16::from(seed) + c * 7) % 251) as u8);
            }
        }
        rec
    }

    #[test]
    fn cifar10_archive_round_trip() {
        let dir = tempdir().unwrap();
        let archive = dir.path().join("cifar-10-binary.tar.gz");
        let mut members = Vec::new();
        let batch_names = [
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ];
        for (bi, name) in batch_names.iter().enumerate() {
            let mut data = Vec::new();
            for r in 0..2u8 {
                data.extend(cifar_record((bi as u8 + r) % 10, bi as u8 * 2 + r));
            }
            members.push((
                format!("cifar-10-batches-bin/{name}"),
                data,
            ));
        }
        let mut test_data = Vec::new();
        test_data.extend(cifar_record(3, 99));
        members.push(("cifar-10-batches-bin/test_batch.bin".to_string(), test_data));
        let members_ref: Vec<(&str, Vec<u8>)> = members
            .iter()
            .map(|(n, d)| (n.as_str(), d.clone()))
            .collect();
        write_targz(&archive, &members_ref);

        let out = dir.path().join("packed");
        let manifests = ingest(
            DatasetName::Cifar10,
            dir.path(),
            &out,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(manifests.len(), 2);
        assert_eq!(manifests[0].count, 10);
        assert_eq!(manifests[1].count, 1);
        assert_eq!(manifests[0].class_histogram.iter().sum::<u64>(), 10);

        let (ds, manifest) = open_split(&out, DatasetName::Cifar10, Split::Train).unwrap();
        assert_eq!(ds.count(), 10);
        assert_eq!(manifest.stats.mean.len(), 3);
        // First record of batch 1: label 0, planar pattern with seed 0.
        let rec = ds.read_record(0).unwrap();
        assert_eq!(rec.label, 0);
        // Pixel (0,0): planar R index 0 -> (0+0+0)%251=0, G -> 7, B -> 14.
        assert_eq!(&rec.pixels[0..3], &[0, 7, 14]);
        // ids are sequential across batches.
        assert_eq!(ds.read_record(9).unwrap().id, 9);
    }

    #[test]
    fn cifar10_checksum_gate() {
        let dir = tempdir().unwrap();
        let archive = dir.path().join("cifar-10-binary.tar.gz");
        let mut data = Vec::new();
        data.extend(cifar_record(0, 0));
        let members: Vec<(&str, Vec<u8>)> = vec![
            ("cifar-10-batches-bin/data_batch_1.bin", data.clone()),
            ("cifar-10-batches-bin/data_batch_2.bin", data.clone()),
            ("cifar-10-batches-bin/data_batch_3.bin", data.clone()),
            ("cifar-10-batches-bin/data_batch_4.bin", data.clone()),
            ("cifar-10-batches-bin/data_batch_5.bin", data.clone()),
            ("cifar-10-batches-bin/test_batch.bin", data.clone()),
        ];
        write_targz(&archive, &members);
        let out = dir.path().join("packed");
        let bad = IngestOptions {
            expected_archive_sha256: Some("0".repeat(64)),
        };
        let err = ingest(DatasetName::Cifar10, &archive, &out, &bad).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }));
        let good = IngestOptions {
            expected_archive_sha256: Some(crate::data::sha256_file(&archive).unwrap()),
        };
        ingest(DatasetName::Cifar10, &archive, &out, &good).unwrap();
    }

    #[test]
    fn cifar10_rejects_truncated_member() {
        let dir = tempdir().unwrap();
        let archive = dir.path().join("cifar-10-binary.tar.gz");
        let mut data = Vec::new();
        data.extend(cifar_record(0, 0));
        data.pop();
        let members: Vec<(&str, Vec<u8>)> = vec![
            ("cifar-10-batches-bin/data_batch_1.bin", data.clone()),
            ("cifar-10-batches-bin/data_batch_2.bin", data.clone()),
            ("cifar-10-batches-bin/data_batch_3.bin", data.clone()),
            ("cifar-10-batches-bin/data_batch_4.bin", data.clone()),
            ("cifar-10-batches-bin/data_batch_5.bin", data.clone()),
            ("cifar-10-batches-bin/test_batch.bin", data.clone()),
        ];
        write_targz(&archive, &members);
        let out = dir.path().join("packed");
        assert!(ingest(
            DatasetName::Cifar10,
            &archive,
            &out,
            &IngestOptions::default()
        )
        .is_err());
    }

    #[test]
    fn cifar100_uses_fine_labels() {
        let dir = tempdir().unwrap();
        let extracted = dir.path().join("cifar-100-binary");
        std::fs::create_dir_all(&extracted).unwrap();
        let mut train = Vec::new();
        for (coarse, fine) in [(1u8, 42u8), (2, 7)] {
            train.push(coarse);
            train.push(fine);
            train.extend(vec![128u8; 3072]);
        }
        std::fs::write(extracted.join("train.bin"), &train).unwrap();
        let mut test = Vec::new();
        test.push(0u8);
        test.push(99u8);
        test.extend(vec![0u8; 3072]);
        std::fs::write(extracted.join("test.bin"), &test).unwrap();

        let out = dir.path().join("packed");
        let manifests = ingest(
            DatasetName::Cifar100,
            dir.path(),
            &out,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(manifests[0].count, 2);
        let (ds, _) = open_split(&out, DatasetName::Cifar100, Split::Train).unwrap();
        assert_eq!(ds.read_record(0).unwrap().label, 42);
        assert_eq!(ds.read_record(1).unwrap().label, 7);
        let (ds, _) = open_split(&out, DatasetName::Cifar100, Split::Test).unwrap();
        assert_eq!(ds.read_record(0).unwrap().label, 99);
    }

    /// The 96-pixel format stores each channel plane column-major; the
    /// packed output must come out row-major.
    #[test]
    fn stl_colmajor_planes_are_transposed() {
        let side = 96usize;
        let area = side * side;
        let dir = tempdir().unwrap();
        let extracted = dir.path().join("stl10_binary");
        std::fs::create_dir_all(&extracted).unwrap();
        // One train image: R plane holds x in column-major order, so
        // R(y, x) must equal x after transposition. G constant, B = y.
        let mut img = vec![0u8; area * 3];
        for x in 0..side {
            for y in 0..side {
                img[x * side + y] = x as u8;
                img[area + x * side + y] = 7;
                img[2 * area + x * side + y] = y as u8;
            }
        }
        std::fs::write(extracted.join("train_X.bin"), &img).unwrap();
        std::fs::write(extracted.join("train_y.bin"), [5u8]).unwrap();
        std::fs::write(extracted.join("test_X.bin"), &img).unwrap();
        std::fs::write(extracted.join("test_y.bin"), [10u8]).unwrap();
        // Two unlabeled copies.
        let mut unl = img.clone();
        unl.extend(&img);
        std::fs::write(extracted.join("unlabeled_X.bin"), &unl).unwrap();

        let out = dir.path().join("packed");
        let manifests = ingest(
            DatasetName::Stl10,
            dir.path(),
            &out,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(manifests.len(), 3);
        let (train, _) = open_split(&out, DatasetName::Stl10, Split::Train).unwrap();
        let rec = train.read_record(0).unwrap();
        assert_eq!(rec.label, 4, "labels are 1-based in the source");
        for &(y, x) in &[(0usize, 0usize), (3, 17), (95, 2), (40, 95)] {
            let px = &rec.pixels[(y * side + x) * 3..][..3];
            assert_eq!(px, &[x as u8, 7, y as u8], "pixel ({y},{x})");
        }

        let (pre, pre_manifest) = open_split(&out, DatasetName::Stl10, Split::Pretrain).unwrap();
        assert_eq!(pre.count(), 3);
        assert_eq!(pre_manifest.unlabeled_count, 2);
        assert_eq!(pre.read_record(0).unwrap().label, 4);
        assert_eq!(pre.read_record(1).unwrap().label, UNLABELED);
        assert_eq!(pre.read_record(2).unwrap().id, 2);
    }

    #[test]
    fn stl_rejects_label_count_mismatch() {
        let dir = tempdir().unwrap();
        let extracted = dir.path().join("stl10_binary");
        std::fs::create_dir_all(&extracted).unwrap();
        let img = vec![0u8; 96 * 96 * 3];
        std::fs::write(extracted.join("train_X.bin"), &img).unwrap();
        std::fs::write(extracted.join("train_y.bin"), [1u8, 2u8]).unwrap();
        std::fs::write(extracted.join("test_X.bin"), &img).unwrap();
        std::fs::write(extracted.join("test_y.bin"), [1u8]).unwrap();
        std::fs::write(extracted.join("unlabeled_X.bin"), &img).unwrap();
        let out = dir.path().join("packed");
        assert!(ingest(
            DatasetName::Stl10,
            dir.path(),
            &out,
            &IngestOptions::default()
        )
        .is_err());
    }

    fn tiny_jpeg(shade: u8) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(64, 64, image::Rgb([shade, shade / 2, 255 - shade]));
        let mut out = Vec::new();
        image::DynamicImage::ImageRgb8(img)
            .write_to(
                &mut std::io::Cursor::new(&mut out),
                image::ImageFormat::Jpeg,
            )
            .unwrap();
        out
    }

    #[test]
    fn tiny_directory_tree_round_trip() {
        let dir = tempdir().unwrap();
        let root = dir.path().join("tiny-imagenet-200");
        let wnids = ["n01443537", "n01629819"];
        std::fs::create_dir_all(&root).unwrap();
        std::fs::write(root.join("wnids.txt"), wnids.join("\n")).unwrap();
        for (wi, wnid) in wnids.iter().enumerate() {
            let imgs = root.join("train").join(wnid).join("images");
            std::fs::create_dir_all(&imgs).unwrap();
            for k in 0..2 {
                std::fs::write(
                    imgs.join(format!("{wnid}_{k}.JPEG")),
                    tiny_jpeg((wi * 100 + k * 30) as u8),
                )
                .unwrap();
            }
        }
        let val_imgs = root.join("val").join("images");
        std::fs::create_dir_all(&val_imgs).unwrap();
        std::fs::write(val_imgs.join("val_0.JPEG"), tiny_jpeg(200)).unwrap();
        std::fs::write(
            root.join("val").join("val_annotations.txt"),
            "val_0.JPEG\tn01629819\t0\t0\t10\t10\n",
        )
        .unwrap();

        let out = dir.path().join("packed");
        let manifests = ingest(
            DatasetName::TinyImagenet,
            &root,
            &out,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(manifests[0].count, 4);
        assert_eq!(manifests[1].count, 1);
        let (train, m) = open_split(&out, DatasetName::TinyImagenet, Split::Train).unwrap();
        assert_eq!(m.class_histogram[0], 2);
        assert_eq!(m.class_histogram[1], 2);
        assert_eq!((train.height(), train.width()), (64, 64));
        // wnids are sorted, so n01443537 is class 0.
        assert_eq!(train.read_record(0).unwrap().label, 0);
        assert_eq!(train.read_record(2).unwrap().label, 1);
        let (val, _) = open_split(&out, DatasetName::TinyImagenet, Split::Test).unwrap();
        assert_eq!(val.read_record(0).unwrap().label, 1);
    }

    #[test]
    fn tiny_zip_round_trip() {
        let dir = tempdir().unwrap();
        let zpath = dir.path().join("tiny-imagenet-200.zip");
        {
            let file = File::create(&zpath).unwrap();
            let mut zw = zip::ZipWriter::new(file);
            let opts: zip::write::SimpleFileOptions = Default::default();
            zw.start_file("tiny-imagenet-200/wnids.txt", opts).unwrap();
            zw.write_all(b"n02000001\n").unwrap();
            zw.start_file(
                "tiny-imagenet-200/train/n02000001/images/n02000001_0.JPEG",
                opts,
            )
            .unwrap();
            zw.write_all(&tiny_jpeg(10)).unwrap();
            zw.start_file("tiny-imagenet-200/val/val_annotations.txt", opts)
                .unwrap();
            zw.write_all(b"val_0.JPEG\tn02000001\t0\t0\t1\t1\n").unwrap();
            zw.start_file("tiny-imagenet-200/val/images/val_0.JPEG", opts)
                .unwrap();
            zw.write_all(&tiny_jpeg(77)).unwrap();
            zw.finish().unwrap();
        }
        let out = dir.path().join("packed");
        let manifests = ingest(
            DatasetName::TinyImagenet,
            &zpath,
            &out,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(manifests[0].count, 1);
        assert_eq!(manifests[1].count, 1);
        let path = packed_path(&out, DatasetName::TinyImagenet, Split::Train);
        assert!(PackedDataset::open(&path).is_ok());
    }
}
