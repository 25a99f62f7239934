use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::Task;
use crate::error::{Error, Result};

/// One curriculum stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage_id: usize,
    pub frames: usize,
    pub tasks: Vec<Task>,
    pub probabilities: Vec<f64>,
    pub step_budget: usize,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.tasks.len() != self.probabilities.len() {
            return Err(Error::Config(format!(
                "stage {}: {} tasks with {} probabilities",
                self.stage_id,
                self.tasks.len(),
                self.probabilities.len()
            )));
        }
        if self.probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config(format!("stage {}: negative probability", self.stage_id)));
        }
        let sum: f64 = self.probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("stage {}: probabilities sum to {sum}", self.stage_id)));
        }
        if self.frames == 0 {
            return Err(Error::Config(format!("stage {}: zero frames", self.stage_id)));
        }
        Ok(())
    }
}

/// Frame lengths and step budgets of the default four-stage curriculum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Clip length of stages 1-3.
    pub short_frames: usize,
    /// Clip length of the extended final stage.
    pub long_frames: usize,
    pub budgets: [usize; 4],
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { short_frames: 7, long_frames: 21, budgets: [200, 200, 200, 100] }
    }
}

impl ScheduleConfig {
    /// Frame lengths of the full-size setting.
    pub fn full_scale() -> Self {
        Self { short_frames: 21, long_frames: 77, ..Self::default() }
    }
}

/// Difficult-to-easy curriculum: text-only first, then ID images, then
/// editing, then longer clips.
pub fn stage_schedule(cfg: &ScheduleConfig) -> Vec<StageSpec> {
    let all = vec![Task::T2v, Task::MultiId, Task::Edit];
    let mix = vec![0.5, 0.3, 0.2];
    vec![
        StageSpec { stage_id: 1, frames: cfg.short_frames, tasks: vec![Task::T2v], probabilities: vec![1.0], step_budget: cfg.budgets[0] },
        StageSpec {
            stage_id: 2,
            frames: cfg.short_frames,
            tasks: vec![Task::T2v, Task::MultiId],
            probabilities: vec![0.6, 0.4],
            step_budget: cfg.budgets[1],
        },
        StageSpec { stage_id: 3, frames: cfg.short_frames, tasks: all.clone(), probabilities: mix.clone(), step_budget: cfg.budgets[2] },
        StageSpec { stage_id: 4, frames: cfg.long_frames, tasks: all, probabilities: mix, step_budget: cfg.budgets[3] },
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingOrder {
    #[default]
    DifficultToEasy,
    EasyToDifficult,
    FullTraining,
}

impl std::str::FromStr for TrainingOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "difficult_to_easy" => Ok(Self::DifficultToEasy),
            "easy_to_difficult" => Ok(Self::EasyToDifficult),
            "full_training" => Ok(Self::FullTraining),
            other => Err(Error::Config(format!("unknown training order {other:?}"))),
        }
    }
}

/// Arranges `stages` for `order`. Full training collapses everything into
/// one stage over all tasks at the final mixture, the shortest clip length
/// and the summed budget.
pub fn order_stages(stages: &[StageSpec], order: TrainingOrder) -> Vec<StageSpec> {
    match order {
        TrainingOrder::DifficultToEasy => stages.to_vec(),
        TrainingOrder::EasyToDifficult => stages.iter().rev().cloned().collect(),
        TrainingOrder::FullTraining => {
            let widest = stages.iter().max_by_key(|s| s.tasks.len()).cloned();
            let frames = stages.iter().map(|s| s.frames).min().unwrap_or(1);
            let budget = stages.iter().map(|s| s.step_budget).sum();
            match widest {
                Some(w) => vec![StageSpec { stage_id: 1, frames, tasks: w.tasks, probabilities: w.probabilities, step_budget: budget }],
                None => Vec::new(),
            }
        }
    }
}

/// Categorical draw over the stage's tasks.
pub fn sample_task<R: Rng>(stage: &StageSpec, rng: &mut R) -> Task {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (task, p) in stage.tasks.iter().zip(&stage.probabilities) {
        acc += p;
        if u < acc {
            return *task;
        }
    }
    *stage.tasks.last().expect("validated stage has tasks")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn schedule_structure() {
        let s = stage_schedule(&ScheduleConfig::default());
        assert_eq!(s.len(), 4);
        s.iter().for_each(|st| st.validate().unwrap());
        assert_eq!(s[0].tasks, vec![Task::T2v]);
        assert_eq!(s[1].probabilities, vec![0.6, 0.4]);
        assert_eq!(s[2].probabilities, vec![0.5, 0.3, 0.2]);
        assert!(s[3].frames > s[2].frames);
        let full = stage_schedule(&ScheduleConfig::full_scale());
        assert_eq!((full[0].frames, full[3].frames), (21, 77));
    }

    #[test]
    fn orders() {
        let s = stage_schedule(&ScheduleConfig::default());
        let rev = order_stages(&s, TrainingOrder::EasyToDifficult);
        assert_eq!(rev.iter().map(|x| x.stage_id).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
        let full = order_stages(&s, TrainingOrder::FullTraining);
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].tasks.len(), 3);
        assert_eq!(full[0].step_budget, 700);
        assert_eq!("full-training".parse::<TrainingOrder>().unwrap(), TrainingOrder::FullTraining);
    }

    #[test]
    fn task_frequencies() {
        let s = stage_schedule(&ScheduleConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!((0..1000).all(|_| sample_task(&s[0], &mut rng) == Task::T2v));
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_task(&s[2], &mut rng) as usize] += 1;
        }
        for (c, p) in counts.iter().zip([0.5, 0.3, 0.2]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn invalid_stages_rejected() {
        let mut s = stage_schedule(&ScheduleConfig::default()).remove(1);
        s.probabilities = vec![0.6, 0.5];
        assert!(s.validate().is_err());
        s.probabilities = vec![1.0];
        assert!(s.validate().is_err());
    }
}
