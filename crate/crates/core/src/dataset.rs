//! Clip manifests, the work-element vocabulary, clip windows, batching, and
//! per-class statistics.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Read;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["clip_path", "label", "frame_count", "fps", "split"];

/// Ordered work-element labels and the subset the model classifies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocabulary {
    labels: Vec<String>,
    active: Vec<String>,
}

impl Default for ClassVocabulary {
    fn default() -> Self {
        ClassVocabulary::new(
            &[
                "crane_out",
                "cutting_and_to_processing",
                "processing",
                "driving",
                "non_productive",
                "other_crane_movement",
            ],
            &["crane_out", "cutting_and_to_processing", "driving", "processing"],
        )
        .expect("built-in vocabulary is valid")
    }
}

impl ClassVocabulary {
    pub fn new(labels: &[&str], active: &[&str]) -> Result<Self> {
        let norm = |s: &&str| s.trim().to_ascii_lowercase();
        let labels: Vec<String> = labels.iter().map(norm).collect();
        let active: Vec<String> = active.iter().map(norm).collect();
        let unique = |v: &[String]| v.iter().collect::<HashSet<_>>().len() == v.len();
        if labels.is_empty() || !unique(&labels) || !unique(&active) {
            return Err(Error::InvalidConfig("vocabulary labels must be unique and non-empty".into()));
        }
        if let Some(a) = active.iter().find(|a| !labels.contains(a)) {
            return Err(Error::InvalidConfig(format!("active label {a:?} not in vocabulary")));
        }
        Ok(ClassVocabulary { labels, active })
    }

    /// Every label, in reporting order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Labels the model predicts; position is the class index.
    pub fn active(&self) -> &[String] {
        &self.active
    }

    pub fn num_active(&self) -> usize {
        self.active.len()
    }

    /// Case-insensitive lookup returning the canonical spelling.
    pub fn canonical(&self, label: &str) -> Option<&str> {
        let l = label.trim();
        self.labels.iter().find(|x| x.eq_ignore_ascii_case(l)).map(String::as_str)
    }

    pub fn active_index(&self, label: &str) -> Option<usize> {
        let l = label.trim();
        self.active.iter().position(|x| x.eq_ignore_ascii_case(l))
    }

    pub fn is_active(&self, label: &str) -> bool {
        self.active_index(label).is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// As written in the manifest; relative paths resolve against its directory.
    pub clip_path: String,
    pub label: String,
    pub frame_count: usize,
    pub fps: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.clip_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).cloned().collect()
    }
}

pub fn load_manifest(path: &Path, vocab: &ClassVocabulary) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening manifest {}", path.display()), e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries = parse_manifest(file, vocab)?;
    Ok(Manifest { base_dir, entries })
}

/// Parses manifest CSV; errors carry 1-based line numbers.
pub fn parse_manifest<R: Read>(reader: R, vocab: &ClassVocabulary) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Manifest { line: 1, message: e.to_string() })?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(Vec::new());
    }
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::Manifest {
            line: 1,
            message: format!("expected header {}, got {}", MANIFEST_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Manifest {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Manifest { line, message };
        let clip_path = rec[0].to_string();
        if clip_path.is_empty() {
            return Err(bad("empty clip_path".into()));
        }
        let label = vocab
            .canonical(&rec[1])
            .ok_or_else(|| Error::UnknownLabel { line, label: rec[1].to_string() })?
            .to_string();
        let frame_count: usize = rec[2]
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| bad(format!("frame_count {:?} is not a positive integer", &rec[2])))?;
        let fps: f64 = rec[3]
            .parse()
            .ok()
            .filter(|f: &f64| f.is_finite() && *f > 0.0)
            .ok_or_else(|| bad(format!("fps {:?} is not a positive number", &rec[3])))?;
        let split = match rec[4].to_ascii_lowercase().as_str() {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(bad(format!("split {other:?} is neither train nor val"))),
        };
        if !seen.insert(clip_path.clone()) {
            return Err(bad(format!("duplicate clip_path {clip_path:?}")));
        }
        out.push(ManifestEntry { clip_path, label, frame_count, fps, split });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let ctx = || format!("writing manifest {}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(ctx(), e.into()))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| Error::io(ctx(), e.into()))?;
    for e in entries {
        let row = [e.clip_path.clone(), e.label.clone(), e.frame_count.to_string(), e.fps.to_string(), e.split.as_str().into()];
        w.write_record(&row).map_err(|e| Error::io(ctx(), e.into()))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Entries whose label the model classifies, in their original order.
pub fn filter_active(entries: &[ManifestEntry], vocab: &ClassVocabulary) -> Vec<ManifestEntry> {
    entries.iter().filter(|e| vocab.is_active(&e.label)).cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    Center,
    Random(u64),
}

/// Frame window of `round(clip_seconds * fps)` frames, or the whole clip if
/// it is no longer than that.
pub fn sample_clip_window(frame_count: usize, fps: f64, clip_seconds: f64, mode: WindowMode) -> Range<usize> {
    let len = ((clip_seconds * fps).round() as usize).max(1);
    if frame_count <= len {
        return 0..frame_count;
    }
    let start = match mode {
        WindowMode::Center => (frame_count - len) / 2,
        WindowMode::Random(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..=frame_count - len),
    };
    start..start + len
}

/// Index batches over `n` items: seeded shuffle or original order, last
/// batch possibly short.
pub fn make_batches(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Number of validation items for a class of `n`: 20% rounded, but at least
/// one item on each side when `n >= 2`.
pub fn val_count(n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * 0.2).round() as usize).clamp(1, n - 1)
}

/// Seeded per-class 80/20 assignment of the split column.
pub fn assign_splits(entries: &mut [ManifestEntry], seed: u64) {
    let mut labels: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
    labels.sort();
    labels.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in labels {
        let mut idx: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].label == label).collect();
        idx.shuffle(&mut rng);
        let k = val_count(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            entries[i].split = if j < k { Split::Val } else { Split::Train };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassStats {
    pub label: String,
    pub count: usize,
    /// Counts for bins `[k * bin_width, (k + 1) * bin_width)`.
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub bin_width: usize,
    /// One row per vocabulary label, in vocabulary order.
    pub classes: Vec<ClassStats>,
}

pub fn compute_stats(entries: &[ManifestEntry], vocab: &ClassVocabulary, bin_width: usize) -> Result<DatasetStats> {
    if bin_width == 0 {
        return Err(Error::InvalidArgument("bin width must be at least 1".into()));
    }
    let bins = entries.iter().map(|e| e.frame_count / bin_width + 1).max().unwrap_or(0);
    let mut classes: Vec<ClassStats> = vocab
        .labels()
        .iter()
        .map(|l| ClassStats { label: l.clone(), count: 0, histogram: vec![0; bins] })
        .collect();
    for e in entries {
        let row = vocab
            .labels()
            .iter()
            .position(|l| l.eq_ignore_ascii_case(&e.label))
            .ok_or_else(|| Error::InvalidArgument(format!("label {:?} not in vocabulary", e.label)))?;
        classes[row].count += 1;
        classes[row].histogram[e.frame_count / bin_width] += 1;
    }
    Ok(DatasetStats { bin_width, classes })
}

impl DatasetStats {
    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.count).sum()
    }

    pub fn count(&self, label: &str) -> Option<usize> {
        self.classes.iter().find(|c| c.label == label).map(|c| c.count)
    }

    /// Aligned text table with one row per class plus a total.
    pub fn render_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.label.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  histogram (bin width {})", "class", "clips", self.bin_width);
        for c in &self.classes {
            let hist: Vec<String> = c.histogram.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{:<width$}  {:>6}  [{}]", c.label, c.count, hist.join(" "));
        }
        let _ = writeln!(s, "{:<width$}  {:>6}", "total", self.total());
        s
    }
}

#[derive(Serialize)]
struct HistogramJson<'a> {
    bin_width: usize,
    counts: &'a [usize],
}

#[derive(Serialize)]
struct ClassJson<'a> {
    count: usize,
    histogram: HistogramJson<'a>,
}

impl Serialize for DatasetStats {
    fn serialize<Z: Serializer>(&self, ser: Z) -> std::result::Result<Z::Ok, Z::Error> {
        let mut map = ser.serialize_map(Some(self.classes.len()))?;
        for c in &self.classes {
            let body = ClassJson {
                count: c.count,
                histogram: HistogramJson { bin_width: self.bin_width, counts: &c.histogram },
            };
            map.serialize_entry(&c.label, &body)?;
        }
        map.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, label: &str, frames: usize) -> ManifestEntry {
        ManifestEntry { clip_path: path.into(), label: label.into(), frame_count: frames, fps: 30.0, split: Split::Train }
    }

    #[test]
    fn parse_examples() {
        let v = ClassVocabulary::default();
        assert!(parse_manifest("clip_path,label,frame_count,fps,split\n".as_bytes(), &v).unwrap().is_empty());
        assert!(parse_manifest("".as_bytes(), &v).unwrap().is_empty());
        let m = parse_manifest("clip_path,label,frame_count,fps,split\na.rvf,Driving,120,30,train\n".as_bytes(), &v).unwrap();
        assert_eq!(m[0].label, "driving");
        assert_eq!(m[0].split, Split::Train);
        let err = parse_manifest("clip_path,label,frame_count,fps,split\na.rvf,driving,1,30,val\nb.rvf,idle,1,30,val\n".as_bytes(), &v)
            .unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { line: 3, ref label } if label == "idle"), "{err}");
    }

    #[test]
    fn parse_errors_name_lines() {
        let v = ClassVocabulary::default();
        let bad = [
            "clip_path,label,frame_count,fps,split\na,driving,0,30,train\n",
            "clip_path,label,frame_count,fps,split\na,driving,5,-1,train\n",
            "clip_path,label,frame_count,fps,split\na,driving,5,30,test\n",
            "clip_path,label,frame_count,fps,split\na,driving,5,30\n",
        ];
        for text in bad {
            assert!(matches!(parse_manifest(text.as_bytes(), &v), Err(Error::Manifest { line: 2, .. })), "{text}");
        }
        let dup = "clip_path,label,frame_count,fps,split\na,driving,5,30,train\na,processing,5,30,val\n";
        assert!(matches!(parse_manifest(dup.as_bytes(), &v), Err(Error::Manifest { line: 3, .. })));
        assert!(matches!(parse_manifest("path,label\n".as_bytes(), &v), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut es = vec![entry("x/a.rvf", "driving", 10), entry("b.rvf", "processing", 3)];
        es[1].fps = 29.97;
        es[1].split = Split::Val;
        write_manifest(&p, &es).unwrap();
        let m = load_manifest(&p, &ClassVocabulary::default()).unwrap();
        assert_eq!(m.entries, es);
        assert_eq!(m.resolve(&m.entries[0]), dir.path().join("x/a.rvf"));
    }

    #[test]
    fn windows() {
        assert_eq!(sample_clip_window(300, 30.0, 4.0, WindowMode::Center), 90..210);
        assert_eq!(sample_clip_window(120, 30.0, 4.0, WindowMode::Center), 0..120);
        assert_eq!(sample_clip_window(120, 30.0, 4.0, WindowMode::Random(1)), 0..120);
        assert_eq!(sample_clip_window(50, 30.0, 4.0, WindowMode::Random(1)), 0..50);
        let r = sample_clip_window(500, 30.0, 4.0, WindowMode::Random(9));
        assert_eq!(r.len(), 120);
        assert!(r.end <= 500);
    }

    #[test]
    fn batches() {
        let b = make_batches(308, 8, Some(1)).unwrap();
        assert_eq!(b.len(), 39);
        assert_eq!(b.last().unwrap().len(), 4);
        assert_eq!(make_batches(5, 8, None).unwrap(), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(make_batches(20, 8, Some(3)).unwrap(), make_batches(20, 8, Some(3)).unwrap());
        assert_ne!(make_batches(20, 8, Some(3)).unwrap(), make_batches(20, 8, Some(4)).unwrap());
        assert!(make_batches(3, 0, None).is_err());
    }

    #[test]
    fn splits() {
        assert_eq!((val_count(8), val_count(2), val_count(1), val_count(100)), (2, 1, 0, 20));
        let mut es: Vec<_> = (0..16)
            .map(|i| entry(&format!("{i}"), if i % 2 == 0 { "driving" } else { "crane_out" }, 5))
            .collect();
        assign_splits(&mut es, 4);
        for l in ["driving", "crane_out"] {
            let v = es.iter().filter(|e| e.label == l && e.split == Split::Val).count();
            assert_eq!(v, 2);
        }
    }

    #[test]
    fn stats_and_json() {
        let v = ClassVocabulary::default();
        let es = vec![entry("a", "driving", 999), entry("b", "crane_out", 1000)];
        let s = compute_stats(&es, &v, 1000).unwrap();
        assert_eq!(s.classes[3].histogram, vec![1, 0]);
        assert_eq!(s.classes[0].histogram, vec![0, 1]);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.starts_with(r#"{"crane_out":{"count":1,"histogram":{"bin_width":1000,"counts":[0,1]}}"#), "{json}");
        assert!(s.render_table().contains("total"));
        assert!(compute_stats(&es, &v, 0).is_err());
    }

    #[test]
    fn vocabulary() {
        let v = ClassVocabulary::default();
        assert_eq!(v.num_active(), 4);
        assert_eq!(v.active_index("DRIVING"), Some(2));
        assert_eq!(v.canonical("Non_Productive"), Some("non_productive"));
        assert!(ClassVocabulary::new(&["a", "a"], &[]).is_err());
        assert!(ClassVocabulary::new(&["a"], &["b"]).is_err());
    }
}
