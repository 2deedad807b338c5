use super::metrics::{accuracy, argmax};
use super::{EvalError, Result};
use crate::agents::Agents;
use crate::par::{self, Exec};
use crate::vectors::{dot, EmbeddingMatrix};

pub const ZERO_SHOT_TEMPLATE: &str = "a H&E image of {class}";

#[derive(Debug, Clone)]
pub struct ZeroShotTask {
    pub class_names: Vec<String>,
    pub template: String,
    pub image_feats: EmbeddingMatrix,
    pub labels: Vec<usize>,
}

impl ZeroShotTask {
    pub fn new(class_names: Vec<String>, image_feats: EmbeddingMatrix, labels: Vec<usize>) -> Result<Self> {
        let task = Self { class_names, template: ZERO_SHOT_TEMPLATE.to_string(), image_feats, labels };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(EvalError::Shape("zero-shot needs at least two classes".into()));
        }
        if self.labels.len() != self.image_feats.n() {
            return Err(EvalError::Shape(format!("{} labels for {} images", self.labels.len(), self.image_feats.n())));
        }
        if self.labels.iter().any(|&l| l >= self.class_names.len()) {
            return Err(EvalError::Shape("label out of range".into()));
        }
        if !self.image_feats.is_normalized() {
            return Err(EvalError::Shape("image features must be L2-normalized".into()));
        }
        if !self.template.contains("{class}") {
            return Err(EvalError::Shape("template lacks a {class} placeholder".into()));
        }
        Ok(())
    }

    pub fn prompts(&self) -> Vec<String> {
        self.class_names.iter().map(|c| self.template.replace("{class}", c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Argmax cosine per image over class embeddings; ties go to the lowest class index.
pub fn zero_shot_predict(image_feats: &EmbeddingMatrix, class_embeds: &[Vec<f32>], exec: Exec) -> Vec<usize> {
    par::map_range(exec, image_feats.n(), |i| {
        let scores: Vec<f64> = class_embeds.iter().map(|c| dot(image_feats.row(i), c)).collect();
        argmax(&scores)
    })
}

pub fn zero_shot_classify(task: &ZeroShotTask, agents: &Agents) -> Result<ZeroShotResult> {
    zero_shot_classify_with(task, agents, Exec::default())
}

pub fn zero_shot_classify_with(task: &ZeroShotTask, agents: &Agents, exec: Exec) -> Result<ZeroShotResult> {
    task.validate()?;
    let class_embeds = agents.embed_texts(&task.prompts())?;
    if class_embeds.iter().any(|c| c.len() != task.image_feats.d()) {
        return Err(EvalError::Shape("text and image embeddings differ in dimension".into()));
    }
    let predictions = zero_shot_predict(&task.image_feats, &class_embeds, exec);
    let accuracy = accuracy(&predictions, &task.labels);
    Ok(ZeroShotResult { predictions, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vectors::normalize_vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(d: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn orthonormal_classes() {
        let img = EmbeddingMatrix::new(3, unit(3, 1), vec!["a".into()], true).unwrap();
        assert_eq!(zero_shot_predict(&img, &[unit(3, 0), unit(3, 1)], Exec::Sequential), vec![1]);
    }

    #[test]
    fn equidistant_images_go_to_class_zero() {
        let rows: Vec<f32> = [unit(3, 2), unit(3, 2), unit(3, 2)].concat();
        let img = EmbeddingMatrix::new(3, rows, vec!["a".into(), "b".into(), "c".into()], true).unwrap();
        let preds = zero_shot_predict(&img, &[unit(3, 0), unit(3, 1)], Exec::Sequential);
        assert_eq!(preds, vec![0, 0, 0]);
        assert!((accuracy(&preds, &[0, 1, 1]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = || normalize_vec(&(0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap();
        let images: Vec<Vec<f32>> = (0..500).map(|_| v()).collect();
        let classes: Vec<Vec<f32>> = (0..9).map(|_| v()).collect();
        let m = EmbeddingMatrix::new(16, images.concat(), (0..500).map(|i| i.to_string()).collect(), true).unwrap();
        let mut oracle = Vec::new();
        for img in &images {
            let mut best = (0, f64::NEG_INFINITY);
            for (c, t) in classes.iter().enumerate() {
                let mut s = 0.0f64;
                for k in 0..16 {
                    s += img[k] as f64 * t[k] as f64;
                }
                if s > best.1 {
                    best = (c, s);
                }
            }
            oracle.push(best.0);
        }
        assert_eq!(zero_shot_predict(&m, &classes, Exec::Parallel), oracle);
        assert_eq!(zero_shot_predict(&m, &classes, Exec::Sequential), oracle);
    }

    #[test]
    fn classify_uses_template() {
        let agents = Agents::mock(0);
        let img = EmbeddingMatrix::new(32, unit(32, 0), vec!["a".into()], true).unwrap();
        let task = ZeroShotTask::new(vec!["tumor".into(), "normal".into()], img, vec![0]).unwrap();
        assert_eq!(task.prompts()[0], "a H&E image of tumor");
        let r = zero_shot_classify(&task, &agents).unwrap();
        assert_eq!(r.predictions.len(), 1);
    }
}
