//! Datasets, class-disjoint task splits and synthetic task streams.

mod cache;
mod idx;
mod synthetic;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Activations, Shape};

pub use cache::{read_sequence, write_sequence};
pub use idx::{
    load_mnist_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages,
};
pub use synthetic::{synthetic_tasks, SYNTHETIC_TEST_PER_CLASS, SYNTHETIC_TRAIN_PER_CLASS};

/// Held-out samples per task used for Fisher and rotation estimates.
pub const DEFAULT_VALIDATION_SIZE: usize = 200;

/// Inputs with one global class id per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    pub inputs: Activations,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(inputs: Activations, labels: Vec<usize>) -> Result<Self> {
        if inputs.n() != labels.len() {
            return Err(Error::dim("labels", inputs.n(), labels.len()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.inputs.shape()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledData> {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.inputs.sample(i)).collect();
        LabeledData::new(
            Activations::from_samples(self.shape(), &rows)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Seeded subset of `count` samples spread as evenly as possible over
    /// the classes present.
    pub fn balanced_subset(&self, count: usize, seed: u64) -> Result<LabeledData> {
        let (picked, _) = balanced_partition(&self.labels, count, seed)?;
        self.subset(&picked)
    }
}

/// Splits indices into a class-balanced pick of `count` and the rest, both
/// shuffled by `seed`.
fn balanced_partition(
    labels: &[usize],
    count: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let classes: Vec<usize> = labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if count > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {count} samples from {}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
    }
    // Even quota per class, remainder to the lowest classes, spilling over
    // from classes that run short.
    let k = by_class.len().max(1);
    let mut quota: Vec<usize> = (0..k)
        .map(|i| count / k + usize::from(i < count % k))
        .collect();
    let mut missing = 0;
    for (q, members) in quota.iter_mut().zip(&by_class) {
        if *q > members.len() {
            missing += *q - members.len();
            *q = members.len();
        }
    }
    for (q, members) in quota.iter_mut().zip(&by_class) {
        let extra = missing.min(members.len() - *q);
        *q += extra;
        missing -= extra;
    }
    let mut picked = Vec::with_capacity(count);
    let mut rest = Vec::with_capacity(labels.len() - count);
    for (q, members) in quota.iter().zip(&by_class) {
        picked.extend_from_slice(&members[..*q]);
        rest.extend_from_slice(&members[*q..]);
    }
    picked.shuffle(&mut rng);
    rest.shuffle(&mut rng);
    Ok((picked, rest))
}

/// One task: its classes and train / held-out validation / test samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub id: usize,
    /// Global class ids, ascending.
    pub classes: Vec<usize>,
    pub train: LabeledData,
    /// Held out from the training data; feeds Fisher and rotation estimates.
    pub validation: LabeledData,
    pub test: LabeledData,
}

impl TaskDataset {
    pub fn input_shape(&self) -> Shape {
        self.train.shape()
    }
}

/// Ordered tasks over class-disjoint groups.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    tasks: Vec<TaskDataset>,
    num_classes: usize,
}

impl TaskSequence {
    /// Validates disjointness, contiguous coverage of `0..num_classes` and
    /// that every label belongs to its task.
    pub fn new(tasks: Vec<TaskDataset>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument(
                "a task sequence needs at least one task".into(),
            ));
        }
        let shape = tasks[0].input_shape();
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if t.classes.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "task {} has no classes",
                    t.id
                )));
            }
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
            for (split, data) in [
                ("train", &t.train),
                ("validation", &t.validation),
                ("test", &t.test),
            ] {
                if data.shape() != shape {
                    return Err(Error::dim("task inputs", shape, data.shape()));
                }
                if let Some(bad) = data.labels.iter().find(|y| !t.classes.contains(y)) {
                    return Err(Error::InvalidArgument(format!(
                        "task {} {split} label {bad} is outside its classes {:?}",
                        t.id, t.classes
                    )));
                }
            }
        }
        let num_classes = seen.len();
        if seen.iter().copied().ne(0..num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class ids {seen:?} are not contiguous from 0"
            )));
        }
        Ok(Self { tasks, num_classes })
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> Shape {
        self.tasks[0].input_shape()
    }

    /// Head size needed through task `k` (0-based).
    pub fn classes_through(&self, k: usize) -> usize {
        self.tasks[..=k].iter().map(|t| t.classes.len()).sum()
    }

    pub fn into_tasks(self) -> Vec<TaskDataset> {
        self.tasks
    }
}

/// Splits `num_classes` classes into `tasks` equal contiguous groups.
pub fn equal_groups(num_classes: usize, tasks: usize) -> Result<Vec<Vec<usize>>> {
    if tasks == 0 || !num_classes.is_multiple_of(tasks) {
        return Err(Error::InvalidArgument(format!(
            "{num_classes} classes cannot be divided into {tasks} equal tasks"
        )));
    }
    let per = num_classes / tasks;
    Ok((0..tasks)
        .map(|t| (t * per..(t + 1) * per).collect())
        .collect())
}

/// Tasks with contiguous ascending class groups of equal size.
///
/// `validation_size` training samples per task are held out, balanced over
/// the task's classes. The seed only affects sample order and the held-out
/// pick, never class assignment.
pub fn disjoint_split(
    train: &LabeledData,
    test: &LabeledData,
    tasks: usize,
    validation_size: usize,
    seed: u64,
) -> Result<TaskSequence> {
    let num_classes = train.classes().len();
    grouped_split(
        train,
        test,
        &equal_groups(num_classes, tasks)?,
        validation_size,
        seed,
    )
}

/// Like [`disjoint_split`] with explicit class groups, e.g. `{0,1,2},{3,4}`.
pub fn grouped_split(
    train: &LabeledData,
    test: &LabeledData,
    groups: &[Vec<usize>],
    validation_size: usize,
    seed: u64,
) -> Result<TaskSequence> {
    let mut tasks = Vec::with_capacity(groups.len());
    for (id, group) in groups.iter().enumerate() {
        let mut classes = group.clone();
        classes.sort_unstable();
        let pick = |data: &LabeledData| -> Vec<usize> {
            (0..data.len())
                .filter(|&i| classes.contains(&data.labels[i]))
                .collect()
        };
        let train_idx = pick(train);
        let test_idx = pick(test);
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "classes {classes:?} have no samples"
            )));
        }
        let task_seed = seed ^ ((id as u64 + 1) << 40);
        let labels: Vec<usize> = train_idx.iter().map(|&i| train.labels[i]).collect();
        let (held, kept) =
            balanced_partition(&labels, validation_size.min(labels.len() - 1), task_seed)?;
        let map =
            |local: Vec<usize>| -> Vec<usize> { local.into_iter().map(|i| train_idx[i]).collect() };
        tasks.push(TaskDataset {
            id,
            classes,
            train: train.subset(&map(kept))?,
            validation: train.subset(&map(held))?,
            test: test.subset(&test_idx)?,
        });
    }
    TaskSequence::new(tasks)
}

/// MNIST train and test sets.
#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: LabeledData,
    pub test: LabeledData,
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Directory holding the four uncompressed MNIST IDX files: `$REWC_MNIST_DIR`
/// if set, else `data/mnist` under the workspace root.
pub fn mnist_dir() -> Option<PathBuf> {
    let has_files = |d: &Path| MNIST_FILES.iter().all(|f| d.join(f).is_file());
    if let Some(dir) = std::env::var_os("REWC_MNIST_DIR") {
        let dir = PathBuf::from(dir);
        return has_files(&dir).then_some(dir);
    }
    let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    [PathBuf::from("data/mnist"), workspace]
        .into_iter()
        .find(|d| has_files(d))
}

/// Loads MNIST from `dir`, zero-padding each side of the 28×28 digits by
/// `padding` pixels (2 gives the customary 32×32).
pub fn load_mnist(dir: &Path, padding: usize) -> Result<Mnist> {
    let [tri, trl, tei, tel] = MNIST_FILES.map(|f| dir.join(f));
    Ok(Mnist {
        train: load_mnist_idx(&tri, &trl, padding)?,
        test: load_mnist_idx(&tei, &tel, padding)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize) -> LabeledData {
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let inputs =
            Activations::new(n, Shape::Flat(1), (0..n).map(|i| i as f64).collect()).unwrap();
        LabeledData::new(inputs, labels).unwrap()
    }

    #[test]
    fn halves_assign_contiguous_classes() {
        let seq = disjoint_split(&toy(10, 30), &toy(10, 5), 2, 20, 0).unwrap();
        assert_eq!(seq.tasks()[0].classes, vec![0, 1, 2, 3, 4]);
        assert_eq!(seq.tasks()[1].classes, vec![5, 6, 7, 8, 9]);
        assert_eq!(seq.num_classes(), 10);
        let val = &seq.tasks()[0].validation;
        for c in 0..5 {
            assert_eq!(val.labels.iter().filter(|&&y| y == c).count(), 4);
        }
    }

    #[test]
    fn one_class_per_task() {
        let seq = disjoint_split(&toy(10, 12), &toy(10, 3), 10, 4, 1).unwrap();
        assert_eq!(seq.len(), 10);
        for (i, t) in seq.tasks().iter().enumerate() {
            assert_eq!(t.classes, vec![i]);
        }
    }

    #[test]
    fn test_sets_partition_the_full_test_set() {
        let test = toy(6, 7);
        let seq = disjoint_split(&toy(6, 20), &test, 3, 6, 2).unwrap();
        let mut seen: Vec<f64> = seq
            .tasks()
            .iter()
            .flat_map(|t| t.test.inputs.data().to_vec())
            .collect();
        seen.sort_by(f64::total_cmp);
        let mut all = test.inputs.data().to_vec();
        all.sort_by(f64::total_cmp);
        assert_eq!(seen, all);
    }

    #[test]
    fn train_and_validation_are_disjoint() {
        let train = toy(4, 25);
        let seq = disjoint_split(&train, &toy(4, 5), 2, 10, 3).unwrap();
        for t in seq.tasks() {
            let v: BTreeSet<u64> = t
                .validation
                .inputs
                .data()
                .iter()
                .map(|x| x.to_bits())
                .collect();
            assert!(t
                .train
                .inputs
                .data()
                .iter()
                .all(|x| !v.contains(&x.to_bits())));
            assert_eq!(t.train.len() + t.validation.len(), 50);
        }
    }

    #[test]
    fn indivisible_split_is_rejected() {
        assert!(disjoint_split(&toy(10, 5), &toy(10, 2), 4, 4, 0).is_err());
        let groups = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7], vec![8, 9]];
        let seq = grouped_split(&toy(10, 10), &toy(10, 2), &groups, 20, 0).unwrap();
        assert_eq!(seq.classes_through(1), 5);
    }

    #[test]
    fn overlapping_tasks_are_rejected() {
        let groups = vec![vec![0, 1], vec![1, 2]];
        assert!(grouped_split(&toy(3, 10), &toy(3, 2), &groups, 2, 0).is_err());
    }

    #[test]
    fn seed_changes_order_not_classes() {
        let a = disjoint_split(&toy(4, 20), &toy(4, 5), 2, 4, 1).unwrap();
        let b = disjoint_split(&toy(4, 20), &toy(4, 5), 2, 4, 2).unwrap();
        assert_eq!(a.tasks()[0].classes, b.tasks()[0].classes);
        assert_ne!(a.tasks()[0].train.labels, b.tasks()[0].train.labels);
    }

    #[test]
    fn balanced_subset_spills_over_short_classes() {
        let mut data = toy(3, 10);
        data.labels[0] = 1; // class 0 now has 9 samples
        let s = data.balanced_subset(27, 0).unwrap();
        assert_eq!(s.len(), 27);
        assert!(data.balanced_subset(31, 0).is_err());
    }
}
