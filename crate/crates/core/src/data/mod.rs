//! Label registry, task splits and the protocol check, plus the synthetic
//! image generator and on-disk pixel store.

mod store;
mod synth;

pub use store::{image_tensor, ImageSource, PixelStore, StoreEntry};
pub use synth::{render, synthesize, DatasetSpec, Recipe, SyntheticData, MAX_SHAPES, MIN_SIDE};

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

/// Share of each composition's images held out for evaluation.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRegistry {
    states: Vec<String>,
    objects: Vec<String>,
    /// `(state, object)` per composition index.
    compositions: Vec<(usize, usize)>,
}

impl LabelRegistry {
    pub fn new(states: Vec<String>, objects: Vec<String>, compositions: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &(s, o) in &compositions {
            if s >= states.len() || o >= objects.len() {
                return Err(Error::Invalid(format!(
                    "composition ({s}, {o}) outside {} states and {} objects",
                    states.len(),
                    objects.len()
                )));
            }
            if !seen.insert((s, o)) {
                return Err(Error::Invalid(format!(
                    "duplicate composition {} {}",
                    states[s], objects[o]
                )));
            }
        }
        for names in [&states, &objects] {
            let unique: BTreeSet<_> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::Invalid("duplicate primitive name".into()));
            }
        }
        Ok(Self {
            states,
            objects,
            compositions,
        })
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn compositions(&self) -> &[(usize, usize)] {
        &self.compositions
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_compositions(&self) -> usize {
        self.compositions.len()
    }

    pub fn state_of(&self, c: usize) -> usize {
        self.compositions[c].0
    }

    pub fn object_of(&self, c: usize) -> usize {
        self.compositions[c].1
    }

    /// `"state object"`.
    pub fn name(&self, c: usize) -> String {
        let (s, o) = self.compositions[c];
        format!("{} {}", self.states[s], self.objects[o])
    }

    pub fn find(&self, state: &str, object: &str) -> Option<usize> {
        self.compositions
            .iter()
            .position(|&(s, o)| self.states[s] == state && self.objects[o] == object)
    }

    /// SHA-256 over the ordered names; checkpoints refuse a mismatched label
    /// space.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.states {
            h.update(b"s:");
            h.update(s.as_bytes());
            h.update([0]);
        }
        for o in &self.objects {
            h.update(b"o:");
            h.update(o.as_bytes());
            h.update([0]);
        }
        for &(s, o) in &self.compositions {
            h.update((s as u64).to_le_bytes());
            h.update((o as u64).to_le_bytes());
        }
        crate::backbone::hex(&h.finalize())
    }
}

/// One line of a metadata file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub sample_id: String,
    pub state: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_path: Option<String>,
}

pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    for need in ["sample_id", "state", "object"] {
        if !headers.iter().any(|h| h == need) {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("missing header column {need}"),
            });
        }
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.deserialize::<MetadataRow>().enumerate() {
        let mut row = rec.map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: format!("record {}: {e}", line + 1),
        })?;
        if row.pixel_path.as_deref() == Some("") {
            row.pixel_path = None;
        }
        if row.sample_id.is_empty() || row.state.is_empty() || row.object.is_empty() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("record {} has an empty field", line + 1),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_metadata(path: &Path, rows: &[MetadataRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "state", "object", "pixel_path"])?;
    for r in rows {
        w.write_record([
            r.sample_id.as_str(),
            &r.state,
            &r.object,
            r.pixel_path.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPolicy {
    /// Shuffle the kept compositions with the seed, then divide.
    RandomPartition,
    /// Divide the count-ranked list contiguously.
    CountSorted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub composition: usize,
    pub pixel_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub compositions: Vec<usize>,
    /// Indices into [`Protocol::samples`].
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task holding composition `c`.
    pub fn task_of(&self, c: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.compositions.contains(&c))
    }
}

/// Registry, samples and task sequence for one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub registry: LabelRegistry,
    pub samples: Vec<SampleRecord>,
    pub tasks: TaskSequence,
}

/// Ranks compositions by image count (ties by name), keeps the top `top_k`,
/// divides them into `n_tasks` tasks under `policy` and holds out
/// [`TEST_FRACTION`] of each composition's images.
pub fn build_splits(
    rows: &[MetadataRow],
    top_k: usize,
    n_tasks: usize,
    policy: SplitPolicy,
    seed: u64,
) -> Result<Protocol> {
    if n_tasks == 0 || top_k < n_tasks {
        return Err(Error::Config(format!("{top_k} compositions cannot fill {n_tasks} tasks")));
    }
    let mut by_pair: BTreeMap<(&str, &str), Vec<&MetadataRow>> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for r in rows {
        if !ids.insert(r.sample_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate sample id {}", r.sample_id)));
        }
        by_pair.entry((&r.state, &r.object)).or_default().push(r);
    }
    if by_pair.len() < top_k {
        return Err(Error::Invalid(format!(
            "metadata has {} compositions, {top_k} requested",
            by_pair.len()
        )));
    }
    let mut ranked: Vec<_> = by_pair.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.len()
            .cmp(&a.1.len())
            .then_with(|| format!("{} {}", a.0 .0, a.0 .1).cmp(&format!("{} {}", b.0 .0, b.0 .1)))
    });
    ranked.truncate(top_k);

    let states: Vec<String> = ranked
        .iter()
        .map(|(k, _)| k.0.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let objects: Vec<String> = ranked
        .iter()
        .map(|(k, _)| k.1.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let s_idx: HashMap<&str, usize> = states.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let o_idx: HashMap<&str, usize> = objects.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let pairs = ranked.iter().map(|(k, _)| (s_idx[k.0], o_idx[k.1])).collect();
    let registry = LabelRegistry::new(states.clone(), objects.clone(), pairs)?;

    let mut order: Vec<usize> = (0..top_k).collect();
    if policy == SplitPolicy::RandomPartition {
        order.shuffle(&mut rng::stream(seed, rng::streams::SPLIT));
    }
    let (base, extra) = (top_k / n_tasks, top_k % n_tasks);
    let mut groups = Vec::with_capacity(n_tasks);
    let mut cursor = 0;
    for t in 0..n_tasks {
        let size = base + usize::from(t < extra);
        groups.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }

    let mut samples = Vec::new();
    let mut train_of = vec![Vec::new(); top_k];
    let mut test_of = vec![Vec::new(); top_k];
    let mut split_rng = rng::stream(seed, rng::streams::SPLIT + 100);
    for (c, (_, members)) in ranked.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Invalid(format!("composition {} has no images", registry.name(c))));
        }
        let mut local: Vec<usize> = (0..members.len()).collect();
        local.shuffle(&mut split_rng);
        let n_test = if members.len() < 2 {
            0
        } else {
            ((members.len() as f64 * TEST_FRACTION).round() as usize).max(1)
        };
        for (pos, &li) in local.iter().enumerate() {
            let r = members[li];
            let idx = samples.len();
            samples.push(SampleRecord {
                id: r.sample_id.clone(),
                composition: c,
                pixel_path: r.pixel_path.clone(),
            });
            if pos < n_test {
                test_of[c].push(idx);
            } else {
                train_of[c].push(idx);
            }
        }
    }
    let tasks = groups
        .into_iter()
        .map(|mut comps| {
            comps.sort_unstable();
            let train = comps.iter().flat_map(|&c| train_of[c].iter().copied()).collect();
            let test = comps.iter().flat_map(|&c| test_of[c].iter().copied()).collect();
            Task {
                compositions: comps,
                train,
                test,
            }
        })
        .collect();
    Ok(Protocol {
        registry,
        samples,
        tasks: TaskSequence { tasks },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    /// Number of tasks in which each state occurs.
    pub state_recurrence: Vec<usize>,
    pub object_recurrence: Vec<usize>,
    pub train_images: Vec<usize>,
    pub test_images: Vec<usize>,
}

impl ProtocolReport {
    /// Primitives that occur in more than one task.
    pub fn recurring_primitives(&self) -> usize {
        self.state_recurrence
            .iter()
            .chain(&self.object_recurrence)
            .filter(|&&n| n > 1)
            .count()
    }
}

/// Checks that tasks are disjoint and cover the registry, and counts how
/// often each primitive recurs across tasks.
pub fn validate_protocol(seq: &TaskSequence, registry: &LabelRegistry) -> Result<ProtocolReport> {
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (t, task) in seq.tasks.iter().enumerate() {
        for &c in &task.compositions {
            if c >= registry.n_compositions() {
                return Err(Error::Protocol(format!("task {} names unknown composition {c}", t + 1)));
            }
            if let Some(&prev) = owner.get(&c) {
                return Err(Error::Protocol(format!(
                    "composition {} appears in task {} and task {}",
                    registry.name(c),
                    prev + 1,
                    t + 1
                )));
            }
            owner.insert(c, t);
        }
    }
    if let Some(missing) = (0..registry.n_compositions()).find(|c| !owner.contains_key(c)) {
        return Err(Error::Protocol(format!(
            "composition {} belongs to no task",
            registry.name(missing)
        )));
    }
    let mut state_tasks = vec![BTreeSet::new(); registry.n_states()];
    let mut object_tasks = vec![BTreeSet::new(); registry.n_objects()];
    for (&c, &t) in &owner {
        state_tasks[registry.state_of(c)].insert(t);
        object_tasks[registry.object_of(c)].insert(t);
    }
    Ok(ProtocolReport {
        state_recurrence: state_tasks.iter().map(BTreeSet::len).collect(),
        object_recurrence: object_tasks.iter().map(BTreeSet::len).collect(),
        train_images: seq.tasks.iter().map(|t| t.train.len()).collect(),
        test_images: seq.tasks.iter().map(|t| t.test.len()).collect(),
    })
}

#[derive(Serialize)]
struct ExportTask {
    task: usize,
    compositions: Vec<String>,
    train_images: usize,
    test_images: usize,
}

/// Writes the task list with composition names as JSON.
pub fn export_task_sequence(path: &Path, protocol: &Protocol) -> Result<()> {
    let tasks: Vec<ExportTask> = protocol
        .tasks
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| ExportTask {
            task: i + 1,
            compositions: t.compositions.iter().map(|&c| protocol.registry.name(c)).collect(),
            train_images: t.train.len(),
            test_images: t.test.len(),
        })
        .collect();
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &serde_json::json!({ "tasks": tasks }))?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(counts: &[(&str, &str, usize)]) -> Vec<MetadataRow> {
        let mut out = Vec::new();
        for &(s, o, n) in counts {
            for i in 0..n {
                out.push(MetadataRow {
                    sample_id: format!("{s}-{o}-{i}"),
                    state: s.into(),
                    object: o.into(),
                    pixel_path: None,
                });
            }
        }
        out
    }

    #[test]
    fn keeps_most_frequent() {
        let m = rows(&[("a", "x", 1), ("b", "x", 10), ("c", "y", 2), ("d", "y", 9)]);
        let p = build_splits(&m, 2, 1, SplitPolicy::CountSorted, 0).unwrap();
        let names: Vec<_> = (0..2).map(|c| p.registry.name(c)).collect();
        assert_eq!(names, ["b x", "d y"]);
        assert_eq!(p.samples.len(), 19);
    }

    #[test]
    fn ties_break_by_name() {
        let m = rows(&[("b", "x", 3), ("a", "y", 3), ("a", "x", 3)]);
        let p = build_splits(&m, 2, 2, SplitPolicy::CountSorted, 0).unwrap();
        assert_eq!(p.registry.name(0), "a x");
        assert_eq!(p.registry.name(1), "a y");
    }

    #[test]
    fn remainder_goes_to_early_tasks() {
        let m = rows(&[("a", "x", 5), ("b", "x", 5), ("c", "x", 5), ("d", "x", 5), ("e", "x", 5)]);
        let p = build_splits(&m, 5, 3, SplitPolicy::CountSorted, 0).unwrap();
        let sizes: Vec<_> = p.tasks.tasks.iter().map(|t| t.compositions.len()).collect();
        assert_eq!(sizes, [2, 2, 1]);
    }

    #[test]
    fn split_is_eighty_twenty() {
        let m = rows(&[("a", "x", 40), ("b", "x", 40)]);
        let p = build_splits(&m, 2, 1, SplitPolicy::CountSorted, 3).unwrap();
        assert_eq!(p.tasks.tasks[0].train.len(), 64);
        assert_eq!(p.tasks.tasks[0].test.len(), 16);
    }

    #[test]
    fn too_few_compositions_rejected() {
        let m = rows(&[("a", "x", 4)]);
        assert!(build_splits(&m, 2, 1, SplitPolicy::CountSorted, 0).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = rows(&[("a", "x", 2), ("b", "x", 2)]);
        m[1].sample_id = m[0].sample_id.clone();
        assert!(build_splits(&m, 2, 1, SplitPolicy::CountSorted, 0).is_err());
    }

    #[test]
    fn recurrence_is_counted() {
        let reg = LabelRegistry::new(
            vec!["s1".into(), "s2".into()],
            vec!["o1".into()],
            vec![(0, 0), (1, 0)],
        )
        .unwrap();
        let task = |c| Task {
            compositions: vec![c],
            train: vec![],
            test: vec![],
        };
        let seq = TaskSequence {
            tasks: vec![task(0), task(1)],
        };
        let r = validate_protocol(&seq, &reg).unwrap();
        assert_eq!(r.object_recurrence, [2]);
        assert_eq!(r.state_recurrence, [1, 1]);
        assert_eq!(r.recurring_primitives(), 1);
    }

    #[test]
    fn overlap_is_named() {
        let reg = LabelRegistry::new(vec!["s1".into()], vec!["o1".into()], vec![(0, 0)]).unwrap();
        let task = Task {
            compositions: vec![0],
            train: vec![],
            test: vec![],
        };
        let seq = TaskSequence {
            tasks: vec![task.clone(), task],
        };
        let err = validate_protocol(&seq, &reg).unwrap_err().to_string();
        assert!(err.contains("s1 o1") && err.contains("task 1") && err.contains("task 2"), "{err}");
    }

    #[test]
    fn registry_rejects_duplicates() {
        assert!(LabelRegistry::new(vec!["s".into()], vec!["o".into()], vec![(0, 0), (0, 0)]).is_err());
        assert!(LabelRegistry::new(vec!["s".into()], vec!["o".into()], vec![(1, 0)]).is_err());
    }

    #[test]
    fn metadata_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.csv");
        let mut m = rows(&[("red", "shirt", 2)]);
        m[0].pixel_path = Some("px/a.rgb".into());
        write_metadata(&path, &m).unwrap();
        assert_eq!(read_metadata(&path).unwrap(), m);
    }

    #[test]
    fn metadata_without_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.csv");
        std::fs::write(&path, "a,red,shirt\nb,blue,shirt\n").unwrap();
        assert!(read_metadata(&path).is_err());
    }
}
