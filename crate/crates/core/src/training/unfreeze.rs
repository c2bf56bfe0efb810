//! Gradual unfreezing: parameter groups thaw from the output side inward,
//! one stage per epoch, until every group is trainable.

use std::collections::HashSet;

use crate::tensor::{Scalar, Tensor};

use super::TrainError;

#[derive(Debug, Clone)]
pub struct UnfreezePlan {
    group_names: Vec<String>,
    // Tensor ids per group, input side first.
    group_ids: Vec<Vec<usize>>,
    epochs_per_stage: usize,
}

impl UnfreezePlan {
    /// Build from input-to-output ordered groups (the head must be last).
    /// Every parameter must appear in exactly one group.
    pub fn new<F: Scalar>(
        groups: &[(String, Vec<Tensor<F>>)],
        epochs_per_stage: usize,
    ) -> Result<Self, TrainError> {
        if groups.is_empty() || epochs_per_stage == 0 {
            return Err(TrainError::InvalidSettings(
                "unfreeze plan needs at least one group and a positive stage length".into(),
            ));
        }
        let mut seen = HashSet::new();
        let mut group_ids = Vec::with_capacity(groups.len());
        for (name, tensors) in groups {
            let ids: Vec<usize> = tensors.iter().map(Tensor::id).collect();
            for &id in &ids {
                if !seen.insert(id) {
                    return Err(TrainError::InvalidSettings(format!(
                        "parameter appears in more than one unfreeze group (group '{name}')"
                    )));
                }
            }
            group_ids.push(ids);
        }
        Ok(Self {
            group_names: groups.iter().map(|(n, _)| n.clone()).collect(),
            group_ids,
            epochs_per_stage,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.group_ids.len()
    }

    /// Groups unfrozen at a 1-based epoch: the last `ceil(epoch / stage)`
    /// groups, saturating once everything is thawed.
    pub fn unfrozen_groups_at_epoch(&self, epoch: usize) -> usize {
        let stages = (epoch.max(1) - 1) / self.epochs_per_stage + 1;
        stages.min(self.group_ids.len())
    }

    /// Trainable tensor ids at a 1-based epoch.
    pub fn trainable_at_epoch(&self, epoch: usize) -> HashSet<usize> {
        let k = self.unfrozen_groups_at_epoch(epoch);
        self.group_ids[self.group_ids.len() - k..]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> UnfreezePlan {
        let groups: Vec<(String, Vec<Tensor<f64>>)> = (0..4)
            .map(|g| {
                let tensors = (0..=g).map(|_| Tensor::param(vec![2], vec![0.0; 2]).unwrap()).collect();
                (format!("group{g}"), tensors)
            })
            .collect();
        UnfreezePlan::new(&groups, 1).unwrap()
    }

    #[test]
    fn unfreezes_back_to_front_until_fourth_epoch() {
        let plan = plan();
        // Group sizes are 1, 2, 3, 4 tensors; head (last) first.
        assert_eq!(plan.trainable_at_epoch(1).len(), 4);
        assert_eq!(plan.trainable_at_epoch(2).len(), 7);
        assert_eq!(plan.trainable_at_epoch(3).len(), 9);
        assert_eq!(plan.trainable_at_epoch(4).len(), 10);
        // Constant after everything is unfrozen.
        assert_eq!(plan.trainable_at_epoch(5).len(), 10);
        assert_eq!(plan.trainable_at_epoch(50).len(), 10);
    }

    #[test]
    fn strictly_increasing_over_first_stages() {
        let plan = plan();
        let counts: Vec<usize> = (1..=5).map(|e| plan.trainable_at_epoch(e).len()).collect();
        for w in counts[..4].windows(2) {
            assert!(w[1] > w[0], "counts {counts:?}");
        }
        assert_eq!(counts[3], counts[4]);
    }

    #[test]
    fn duplicate_membership_is_rejected() {
        let shared = Tensor::<f64>::param(vec![1], vec![0.0]).unwrap();
        let groups = vec![
            ("a".to_string(), vec![shared.clone()]),
            ("b".to_string(), vec![shared]),
        ];
        assert!(UnfreezePlan::new(&groups, 1).is_err());
    }
}
