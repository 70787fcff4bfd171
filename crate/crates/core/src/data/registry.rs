//! Dataset catalogue and adapters for each dataset's published file layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::matfile::read_mat;
use super::RawRecording;
use crate::error::{HaroodError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Dsads,
    Uschad,
    Ucihar,
    Pamap2,
    Emg,
    Wesad,
}

impl DatasetId {
    pub const ALL: [DatasetId; 6] = [
        DatasetId::Dsads,
        DatasetId::Uschad,
        DatasetId::Ucihar,
        DatasetId::Pamap2,
        DatasetId::Emg,
        DatasetId::Wesad,
    ];

    /// Case-insensitive; hyphens and underscores are ignored.
    pub fn parse(name: &str) -> Result<Self> {
        let key: String = name
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .flat_map(char::to_lowercase)
            .collect();
        Ok(match key.as_str() {
            "dsads" => DatasetId::Dsads,
            "uschad" | "usc" => DatasetId::Uschad,
            "ucihar" | "uci" | "har" => DatasetId::Ucihar,
            "pamap2" | "pamap" => DatasetId::Pamap2,
            "emg" => DatasetId::Emg,
            "wesad" => DatasetId::Wesad,
            _ => return Err(HaroodError::Registry(format!("unknown dataset '{name}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Dsads => "dsads",
            DatasetId::Uschad => "uschad",
            DatasetId::Ucihar => "ucihar",
            DatasetId::Pamap2 => "pamap2",
            DatasetId::Emg => "emg",
            DatasetId::Wesad => "wesad",
        }
    }

    pub fn info(self) -> DatasetInfo {
        dataset_info(self)
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetInfo {
    pub id: DatasetId,
    pub subjects: usize,
    /// Activities recorded by the dataset.
    pub activities: usize,
    /// Classes kept after ingestion.
    pub class_count: usize,
    pub sampling_rate_hz: f64,
    pub sensor_positions: Vec<&'static str>,
    pub channel_names: Vec<String>,
    pub default_window: usize,
    pub default_step: usize,
}

fn axes(prefix: &str) -> Vec<String> {
    ["x", "y", "z"].iter().map(|a| format!("{prefix}_{a}")).collect()
}

pub fn dataset_info(id: DatasetId) -> DatasetInfo {
    match id {
        DatasetId::Dsads => {
            let positions = vec!["torso", "right_arm", "left_arm", "right_leg", "left_leg"];
            let channel_names = positions
                .iter()
                .flat_map(|p| ["acc", "gyro", "mag"].iter().flat_map(move |s| axes(&format!("{p}_{s}"))))
                .collect();
            DatasetInfo {
                id,
                subjects: 8,
                activities: 19,
                class_count: 19,
                sampling_rate_hz: 25.0,
                sensor_positions: positions,
                channel_names,
                default_window: 125,
                default_step: 125,
            }
        }
        DatasetId::Uschad => DatasetInfo {
            id,
            subjects: 14,
            activities: 12,
            class_count: 12,
            sampling_rate_hz: 100.0,
            sensor_positions: vec!["front_right_hip"],
            channel_names: [axes("acc"), axes("gyro")].concat(),
            default_window: 200,
            default_step: 100,
        },
        DatasetId::Ucihar => DatasetInfo {
            id,
            subjects: 30,
            activities: 6,
            class_count: 6,
            sampling_rate_hz: 50.0,
            sensor_positions: vec!["waist"],
            channel_names: [axes("total_acc"), axes("body_gyro"), axes("body_acc")].concat(),
            default_window: 128,
            default_step: 128,
        },
        DatasetId::Pamap2 => {
            let positions = vec!["hand", "chest", "ankle"];
            let channel_names = positions
                .iter()
                .flat_map(|p| ["acc", "gyro", "mag"].iter().flat_map(move |s| axes(&format!("{p}_{s}"))))
                .collect();
            DatasetInfo {
                id,
                subjects: 9,
                activities: 18,
                class_count: PAMAP2_ACTIVITIES.len(),
                sampling_rate_hz: 100.0,
                sensor_positions: positions,
                channel_names,
                default_window: 200,
                default_step: 100,
            }
        }
        DatasetId::Emg => DatasetInfo {
            id,
            subjects: 36,
            activities: 7,
            class_count: 6,
            sampling_rate_hz: 1000.0,
            sensor_positions: vec!["forearm"],
            channel_names: (1..=8).map(|i| format!("emg_{i}")).collect(),
            default_window: 200,
            default_step: 100,
        },
        DatasetId::Wesad => DatasetInfo {
            id,
            subjects: 15,
            activities: 4,
            class_count: 4,
            sampling_rate_hz: 700.0,
            sensor_positions: vec!["chest"],
            channel_names: ["ecg", "eda", "emg", "resp", "temp"]
                .iter()
                .map(|s| s.to_string())
                .chain(axes("acc"))
                .collect(),
            default_window: 200,
            default_step: 100,
        },
    }
}

/// Activity ids kept from PAMAP2, in class-index order.
pub const PAMAP2_ACTIVITIES: [u32; 12] = [1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24];

/// Loads every recording of a dataset from its published layout under `root`.
pub fn load_dataset(name: &str, root: &Path) -> Result<Vec<RawRecording>> {
    let id = DatasetId::parse(name)?;
    if !root.exists() {
        return Err(HaroodError::ingestion(root, "dataset root does not exist"));
    }
    let recs = match id {
        DatasetId::Dsads => load_dsads(root),
        DatasetId::Uschad => load_uschad(root),
        DatasetId::Ucihar => load_ucihar(root),
        DatasetId::Pamap2 => load_pamap2(root),
        DatasetId::Emg => load_emg(root),
        DatasetId::Wesad => load_wesad(root),
    }?;
    if recs.is_empty() {
        return Err(HaroodError::ingestion(root, format!("no {id} recordings found")));
    }
    Ok(recs)
}

fn metadata(id: DatasetId, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let info = id.info();
    let mut m = BTreeMap::new();
    m.insert("dataset".into(), id.name().into());
    m.insert("sampling_rate_hz".into(), info.sampling_rate_hz.to_string());
    m.insert("sensor_positions".into(), info.sensor_positions.join(","));
    for (k, v) in extra {
        m.insert((*k).into(), v.clone());
    }
    m
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HaroodError::ingestion(path, e.to_string()))
}

/// Parses delimiter-separated numeric rows; blank lines are skipped.
fn parse_rows(path: &Path, text: &str, delims: &[char]) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(|c: char| delims.contains(&c))
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|_| {
                        HaroodError::ingestion(path, format!("line {}: bad number '{t}'", i + 1))
                    })
                })
                .collect()
        })
        .collect()
}

/// Leading integer embedded in a name such as `p3`, `Subject12`, `subject105.dat`.
fn number_in(name: &str) -> Option<usize> {
    let digits: String = name
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| HaroodError::ingestion(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort_by_key(|p| {
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        (number_in(&name).unwrap_or(usize::MAX), name)
    });
    Ok(out)
}

/// Descends into `child` when `root` is its parent directory.
fn resolve(root: &Path, child: &str) -> PathBuf {
    let nested = root.join(child);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn recording(
    id: DatasetId,
    path: &Path,
    rows: Vec<Vec<f64>>,
    subject: usize,
    label: usize,
    extra: &[(&str, String)],
) -> Result<RawRecording> {
    let channels = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != channels) {
        return Err(HaroodError::ingestion(path, format!("row {} has a different column count", i + 1)));
    }
    let stream: Vec<f64> = rows.into_iter().flatten().collect();
    if stream.iter().any(|v| !v.is_finite()) {
        return Err(HaroodError::ingestion(path, "non-finite sample"));
    }
    RawRecording::new(stream, channels, subject, label, metadata(id, extra))
        .map_err(|e| HaroodError::ingestion(path, e.to_string()))
}

/// `a{01..19}/p{1..8}/s{01..60}.txt`, each 125 rows × 45 comma-separated columns.
fn load_dsads(root: &Path) -> Result<Vec<RawRecording>> {
    let root = resolve(root, "data");
    let mut out = Vec::new();
    for act_dir in sorted_entries(&root)?.into_iter().filter(|p| p.is_dir()) {
        let Some(a) = act_dir.file_name().and_then(|n| number_in(&n.to_string_lossy())) else {
            continue;
        };
        for subj_dir in sorted_entries(&act_dir)?.into_iter().filter(|p| p.is_dir()) {
            let Some(p) = subj_dir.file_name().and_then(|n| number_in(&n.to_string_lossy())) else {
                continue;
            };
            for seg in sorted_entries(&subj_dir)? {
                if seg.extension().is_none_or(|e| e != "txt") {
                    continue;
                }
                let rows = parse_rows(&seg, &read_text(&seg)?, &[','])?;
                if rows.first().map_or(0, Vec::len) != 45 {
                    return Err(HaroodError::ingestion(&seg, "expected 45 columns"));
                }
                let segment = seg.file_stem().and_then(|s| number_in(&s.to_string_lossy())).unwrap_or(0);
                out.push(recording(
                    DatasetId::Dsads,
                    &seg,
                    rows,
                    p - 1,
                    a - 1,
                    &[("segment", segment.to_string())],
                )?);
            }
        }
    }
    out.sort_by_key(|r| (r.subject_id, r.meta("segment").and_then(|s| s.parse::<usize>().ok()), r.activity_label));
    Ok(out)
}

/// `Subject{1..14}/a{1..12}t{1..5}.mat` with a `sensor_readings` N×6 matrix
/// (a `.csv` with the same stem is accepted instead).
fn load_uschad(root: &Path) -> Result<Vec<RawRecording>> {
    let mut out = Vec::new();
    for subj_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = subj_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if !name.to_lowercase().starts_with("subject") {
            continue;
        }
        let Some(s) = number_in(&name) else { continue };
        for file in sorted_entries(&subj_dir)? {
            let stem = file.file_stem().unwrap_or_default().to_string_lossy().to_lowercase();
            let Some((a, t)) = stem
                .strip_prefix('a')
                .and_then(|r| r.split_once('t'))
                .and_then(|(a, t)| Some((a.parse::<usize>().ok()?, t.parse::<usize>().ok()?)))
            else {
                continue;
            };
            let ext = file.extension().unwrap_or_default().to_string_lossy().to_lowercase();
            let rows = match ext.as_str() {
                "mat" => {
                    let bytes = fs::read(&file).map_err(|e| HaroodError::ingestion(&file, e.to_string()))?;
                    let vars = read_mat(&bytes).map_err(|e| HaroodError::ingestion(&file, e.to_string()))?;
                    let (r, c, data) = vars
                        .get("sensor_readings")
                        .and_then(|v| v.to_row_major())
                        .ok_or_else(|| HaroodError::ingestion(&file, "missing 2-D sensor_readings"))?;
                    if c != 6 {
                        return Err(HaroodError::ingestion(&file, format!("expected 6 columns, found {c}")));
                    }
                    data.chunks(c).take(r).map(<[f64]>::to_vec).collect()
                }
                "csv" => parse_rows(&file, &read_text(&file)?, &[',', ' ', '\t'])?,
                _ => continue,
            };
            out.push(recording(
                DatasetId::Uschad,
                &file,
                rows,
                s - 1,
                a - 1,
                &[("trial", t.to_string())],
            )?);
        }
    }
    Ok(out)
}

/// `{train,test}/Inertial Signals/<signal>_<split>.txt` (one 128-step window per row)
/// with `subject_<split>.txt` and `y_<split>.txt`.
fn load_ucihar(root: &Path) -> Result<Vec<RawRecording>> {
    let root = resolve(root, "UCI HAR Dataset");
    let signals = [
        "total_acc_x", "total_acc_y", "total_acc_z",
        "body_gyro_x", "body_gyro_y", "body_gyro_z",
        "body_acc_x", "body_acc_y", "body_acc_z",
    ];
    let mut out = Vec::new();
    for split in ["train", "test"] {
        let dir = root.join(split);
        if !dir.is_dir() {
            continue;
        }
        let read_ints = |file: PathBuf| -> Result<Vec<usize>> {
            let text = read_text(&file)?;
            text.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| HaroodError::ingestion(&file, format!("bad integer '{t}'")))
                })
                .collect()
        };
        let subjects = read_ints(dir.join(format!("subject_{split}.txt")))?;
        let labels = read_ints(dir.join(format!("y_{split}.txt")))?;
        let mut channels = Vec::new();
        for sig in signals {
            let file = dir.join("Inertial Signals").join(format!("{sig}_{split}.txt"));
            let rows = parse_rows(&file, &read_text(&file)?, &[' ', '\t'])?;
            if rows.len() != labels.len() {
                return Err(HaroodError::ingestion(&file, "row count differs from y file"));
            }
            channels.push(rows);
        }
        if subjects.len() != labels.len() {
            return Err(HaroodError::ingestion(dir.join(format!("subject_{split}.txt")), "length differs from y file"));
        }
        for i in 0..labels.len() {
            let len = channels[0][i].len();
            let rows = (0..len)
                .map(|t| channels.iter().map(|ch| ch[i].get(t).copied().unwrap_or(f64::NAN)).collect())
                .collect();
            if labels[i] == 0 || subjects[i] == 0 {
                return Err(HaroodError::ingestion(&dir, "labels and subjects are 1-based"));
            }
            out.push(recording(
                DatasetId::Ucihar,
                &dir,
                rows,
                subjects[i] - 1,
                labels[i] - 1,
                &[("split", split.to_string()), ("row", i.to_string())],
            )?);
        }
    }
    out.sort_by_key(|r| r.subject_id);
    Ok(out)
}

/// Splits a labelled sample stream into maximal runs of one label.
fn segment_runs(rows: Vec<(usize, Vec<f64>)>) -> Vec<(usize, Vec<Vec<f64>>)> {
    let mut out: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    for (label, row) in rows {
        match out.last_mut() {
            Some((l, run)) if *l == label => run.push(row),
            _ => out.push((label, vec![row])),
        }
    }
    out
}

/// `Protocol/subject10{1..9}.dat`, 54 space-separated columns; keeps acc16, gyro and mag
/// of the hand, chest and ankle units and drops rows with missing values.
fn load_pamap2(root: &Path) -> Result<Vec<RawRecording>> {
    let dir = resolve(root, "Protocol");
    let mut out = Vec::new();
    for file in sorted_entries(&dir)? {
        if file.extension().is_none_or(|e| e != "dat") {
            continue;
        }
        let Some(n) = file.file_stem().and_then(|s| number_in(&s.to_string_lossy())) else {
            continue;
        };
        let subject = n.checked_sub(101).ok_or_else(|| HaroodError::ingestion(&file, "subject ids start at 101"))?;
        let text = read_text(&file)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.is_empty() {
                continue;
            }
            if cols.len() < 54 {
                return Err(HaroodError::ingestion(&file, format!("line {} has {} columns", i + 1, cols.len())));
            }
            let activity: u32 = cols[1]
                .parse::<f64>()
                .map_err(|_| HaroodError::ingestion(&file, format!("line {}: bad activity id", i + 1)))?
                as u32;
            let Some(label) = PAMAP2_ACTIVITIES.iter().position(|&a| a == activity) else {
                continue;
            };
            let mut vals = Vec::with_capacity(27);
            for base in [3usize, 20, 37] {
                for off in (1..4).chain(7..10).chain(10..13) {
                    let t = cols[base + off];
                    vals.push(t.parse::<f64>().unwrap_or(f64::NAN));
                }
            }
            if vals.iter().all(|v| v.is_finite()) {
                rows.push((label, vals));
            }
        }
        for (k, (label, run)) in segment_runs(rows).into_iter().enumerate() {
            out.push(recording(DatasetId::Pamap2, &file, run, subject, label, &[("segment", k.to_string())])?);
        }
    }
    Ok(out)
}

/// `<subject 01..36>/*.txt`, tab-separated `time, channel1..8, class` with a header;
/// classes 1–6 become 0–5, unmarked (0) and class 7 are dropped.
fn load_emg(root: &Path) -> Result<Vec<RawRecording>> {
    let root = resolve(root, "EMG_data_for_gestures-master");
    let mut out = Vec::new();
    for subj_dir in sorted_entries(&root)?.into_iter().filter(|p| p.is_dir()) {
        let Some(n) = subj_dir.file_name().and_then(|s| number_in(&s.to_string_lossy())) else {
            continue;
        };
        let subject = n.checked_sub(1).ok_or_else(|| HaroodError::ingestion(&subj_dir, "subject ids start at 1"))?;
        for (fi, file) in sorted_entries(&subj_dir)?.into_iter().enumerate() {
            if file.extension().is_none_or(|e| e != "txt") {
                continue;
            }
            let text = read_text(&file)?;
            let mut rows = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let cols: Vec<&str> = line.split_whitespace().collect();
                if cols.is_empty() || cols[0].parse::<f64>().is_err() {
                    continue;
                }
                if cols.len() < 10 {
                    return Err(HaroodError::ingestion(&file, format!("line {} has {} columns", i + 1, cols.len())));
                }
                let parsed: Vec<f64> = cols[1..10]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| HaroodError::ingestion(&file, format!("line {}: bad number", i + 1)))?;
                let class = parsed[8] as usize;
                if (1..=6).contains(&class) {
                    rows.push((class - 1, parsed[..8].to_vec()));
                } else {
                    rows.push((usize::MAX, Vec::new()));
                }
            }
            for (k, (label, run)) in segment_runs(rows).into_iter().enumerate() {
                if label == usize::MAX {
                    continue;
                }
                out.push(recording(
                    DatasetId::Emg,
                    &file,
                    run,
                    subject,
                    label,
                    &[("file", fi.to_string()), ("segment", k.to_string())],
                )?);
            }
        }
    }
    Ok(out)
}

/// `S{n}/S{n}_chest.csv` exported from the chest device, header
/// `ACC_x,ACC_y,ACC_z,ECG,EMG,EDA,Temp,Resp,label`; labels 1–4 become 0–3.
fn load_wesad(root: &Path) -> Result<Vec<RawRecording>> {
    let order = ["ECG", "EDA", "EMG", "Resp", "Temp", "ACC_x", "ACC_y", "ACC_z"];
    let mut out = Vec::new();
    let subjects: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('S')))
        .collect();
    for (subject, dir) in subjects.iter().enumerate() {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let file = dir.join(format!("{name}_chest.csv"));
        let text = read_text(&file)?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| HaroodError::ingestion(&file, "empty file"))?
            .split(',')
            .map(|h| h.trim().to_string())
            .collect();
        let col = |h: &str| {
            header
                .iter()
                .position(|x| x.eq_ignore_ascii_case(h))
                .ok_or_else(|| HaroodError::ingestion(&file, format!("missing column {h}")))
        };
        let picks: Vec<usize> = order.iter().map(|h| col(h)).collect::<Result<_>>()?;
        let label_col = col("label")?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let get = |c: usize| -> Result<f64> {
                cols.get(c)
                    .and_then(|t| t.trim().parse::<f64>().ok())
                    .ok_or_else(|| HaroodError::ingestion(&file, format!("line {}: bad value", i + 2)))
            };
            let label = get(label_col)? as usize;
            if (1..=4).contains(&label) {
                rows.push((label - 1, picks.iter().map(|&c| get(c)).collect::<Result<Vec<_>>>()?));
            } else {
                rows.push((usize::MAX, Vec::new()));
            }
        }
        for (k, (label, run)) in segment_runs(rows).into_iter().enumerate() {
            if label == usize::MAX {
                continue;
            }
            out.push(recording(
                DatasetId::Wesad,
                &file,
                run,
                subject,
                label,
                &[("source_subject", name.clone()), ("segment", k.to_string())],
            )?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogue_matches_dataset_statistics() {
        let dsads = DatasetId::parse("dsads").unwrap().info();
        assert_eq!((dsads.subjects, dsads.activities), (8, 19));
        let wesad = DatasetId::parse("WESAD").unwrap().info();
        assert_eq!((wesad.subjects, wesad.activities), (15, 4));
        assert_eq!(dsads.channel_names.len(), 45);
        assert_eq!(DatasetId::Pamap2.info().channel_names.len(), 27);
        assert_eq!(DatasetId::Wesad.info().channel_names.len(), 8);
    }

    #[test]
    fn unknown_dataset_is_registry_error() {
        assert!(matches!(DatasetId::parse("unknown"), Err(HaroodError::Registry(_))));
        assert!(matches!(
            load_dataset("unknown", Path::new("/")),
            Err(HaroodError::Registry(_))
        ));
    }

    #[test]
    fn runs_split_on_label_change() {
        let rows = vec![(0, vec![1.0]), (0, vec![2.0]), (1, vec![3.0]), (0, vec![4.0])];
        let runs = segment_runs(rows);
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[0].1.len(), 2);
    }
}
