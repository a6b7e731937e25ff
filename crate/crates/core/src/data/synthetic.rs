//! Gaussian-blob task streams for fast deterministic experiments.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LabeledData, TaskDataset, TaskSequence};
use crate::error::{Error, Result};
use crate::nn::{Activations, Shape};

pub const SYNTHETIC_TRAIN_PER_CLASS: usize = 200;
pub const SYNTHETIC_TEST_PER_CLASS: usize = 100;
/// Extra held-out samples per class, drawn beside the training set.
pub const SYNTHETIC_VALIDATION_PER_CLASS: usize = 40;

/// Class means at pairwise distance at least `separation`.
fn class_means(rng: &mut ChaCha8Rng, classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut spread = separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while means.len() < classes {
        let candidate: Vec<f64> = (0..dim)
            .map(|_| {
                spread * {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    z
                }
            })
            .collect();
        let far = means.iter().all(|m| {
            let d2: f64 = m
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2 >= separation * separation
        });
        if far {
            means.push(candidate);
        } else {
            attempts += 1;
            if attempts % 100 == 0 {
                spread *= 1.5;
            }
        }
    }
    means
}

fn blob_set(
    rng: &mut ChaCha8Rng,
    means: &[(usize, &Vec<f64>)],
    per_class: usize,
) -> Result<LabeledData> {
    let dim = means[0].1.len();
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(means.len() * per_class);
    for &(class, mean) in means {
        for _ in 0..per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|m| {
                    m + {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        z
                    }
                })
                .collect();
            rows.push((class, x));
        }
    }
    rows.shuffle(rng);
    let labels = rows.iter().map(|(c, _)| *c).collect();
    let data = rows.into_iter().flat_map(|(_, x)| x).collect();
    LabeledData::new(
        Activations::new(means.len() * per_class, Shape::Flat(dim), data)?,
        labels,
    )
}

/// `tasks` tasks of `classes_per_task` Gaussian classes each in `dim`
/// dimensions, with unit within-class noise.
pub fn synthetic_tasks(
    seed: u64,
    tasks: usize,
    classes_per_task: usize,
    dim: usize,
    separation: f64,
) -> Result<TaskSequence> {
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if tasks == 0 || classes_per_task == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "tasks, classes per task and dim must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(&mut rng, tasks * classes_per_task, dim, separation);
    let mut out = Vec::with_capacity(tasks);
    for id in 0..tasks {
        let classes: Vec<usize> = (id * classes_per_task..(id + 1) * classes_per_task).collect();
        let group: Vec<(usize, &Vec<f64>)> = classes.iter().map(|&c| (c, &means[c])).collect();
        out.push(TaskDataset {
            id,
            classes: classes.clone(),
            train: blob_set(&mut rng, &group, SYNTHETIC_TRAIN_PER_CLASS)?,
            validation: blob_set(&mut rng, &group, SYNTHETIC_VALIDATION_PER_CLASS)?,
            test: blob_set(&mut rng, &group, SYNTHETIC_TEST_PER_CLASS)?,
        });
    }
    TaskSequence::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_class_ids() {
        let seq = synthetic_tasks(1, 2, 2, 8, 10.0).unwrap();
        assert_eq!(seq.num_classes(), 4);
        assert_eq!(seq.tasks()[1].classes, vec![2, 3]);
        assert_eq!(seq.tasks()[0].train.len(), 400);
        assert_eq!(seq.tasks()[0].test.len(), 200);
        assert_eq!(seq.tasks()[0].validation.len(), 80);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            synthetic_tasks(3, 2, 3, 4, 5.0).unwrap(),
            synthetic_tasks(3, 2, 3, 4, 5.0).unwrap()
        );
        assert_ne!(
            synthetic_tasks(3, 2, 3, 4, 5.0).unwrap(),
            synthetic_tasks(4, 2, 3, 4, 5.0).unwrap()
        );
    }

    #[test]
    fn means_respect_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let means = class_means(&mut rng, 12, 2, 3.0);
        for i in 0..12 {
            for j in 0..i {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                assert!(d.sqrt() >= 3.0);
            }
        }
        assert!(synthetic_tasks(0, 1, 2, 2, 0.0).is_err());
    }
}
