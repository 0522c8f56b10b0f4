//! Student/teacher pair with an EMA teacher and a frozen source copy.

use crate::error::{Error, Result};
use crate::netcore::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub student: ParamSet,
    pub teacher: ParamSet,
    source: ParamSet,
    alpha: f64,
}

pub fn check_alpha(field: &str, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(field, format!("{alpha} is outside [0, 1]")));
    }
    Ok(())
}

// Equal inputs are returned untouched so a converged teacher stays bit-exact.
fn blend(alpha: f64, teacher: f64, student: f64) -> f64 {
    if teacher == student {
        teacher
    } else {
        alpha * teacher + (1.0 - alpha) * student
    }
}

impl ModelPair {
    /// Student and teacher both start as copies of the source model.
    pub fn new(source: ParamSet, alpha_mt: f64) -> Result<Self> {
        check_alpha("alpha_mt", alpha_mt)?;
        Ok(ModelPair {
            student: source.clone(),
            teacher: source.clone(),
            source,
            alpha: alpha_mt,
        })
    }

    pub fn source(&self) -> &ParamSet {
        &self.source
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
    pub fn ema_update(&mut self) -> Result<()> {
        if !self.student.same_shape(&self.teacher) {
            return Err(Error::dim(
                "ema_update",
                "matching student/teacher",
                "mismatch",
            ));
        }
        let a = self.alpha;
        for (t, s) in self
            .teacher
            .layers_mut()
            .iter_mut()
            .zip(self.student.layers())
        {
            t.weight
                .zip_apply(&s.weight, |tv, sv| *tv = blend(a, *tv, sv));
            t.bias.zip_apply(&s.bias, |tv, sv| *tv = blend(a, *tv, sv));
        }
        Ok(())
    }

    /// Makes the teacher an exact copy of the student (mean teacher disabled).
    pub fn sync_teacher(&mut self) {
        self.teacher = self.student.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Arch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64) -> ParamSet {
        let arch = Arch::new(3, vec![4], 3, 2, 2).unwrap();
        ParamSet::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn init_copies_source() {
        let src = random_params(1);
        let pair = ModelPair::new(src.clone(), 0.999).unwrap();
        assert_eq!(pair.student, src);
        assert_eq!(pair.teacher, src);
        assert_eq!(pair.source(), &src);
        assert!(ModelPair::new(src.clone(), 0.99).is_ok());
        assert!(ModelPair::new(src.clone(), 1.2).is_err());
        assert!(ModelPair::new(src, -0.1).is_err());
    }

    #[test]
    fn ema_fixed_point_and_degenerate_alpha() {
        let mut pair = ModelPair::new(random_params(2), 0.9).unwrap();
        let before = pair.teacher.clone();
        pair.ema_update().unwrap();
        assert_eq!(pair.teacher, before);

        let mut pair = ModelPair::new(random_params(2), 0.0).unwrap();
        pair.student = random_params(3);
        pair.ema_update().unwrap();
        assert_eq!(pair.teacher, pair.student);
    }

    #[test]
    fn ema_zero_teacher_unit_student() {
        let zeros = ParamSet::zeros(random_params(0).arch());
        let mut pair = ModelPair::new(zeros, 0.9).unwrap();
        for l in pair.student.layers_mut() {
            l.weight.fill(1.0);
            l.bias.fill(1.0);
        }
        let student = pair.student.clone();
        pair.ema_update().unwrap();
        assert!(pair.teacher.values().all(|v| (v - 0.1).abs() < 1e-15));
        assert_eq!(pair.student, student);
        assert!(pair.source().values().all(|v| v == 0.0));
    }

    #[test]
    fn teacher_stays_between_previous_and_student() {
        let mut pair = ModelPair::new(random_params(4), 0.7).unwrap();
        pair.student = random_params(5);
        let prev = pair.teacher.clone();
        pair.ema_update().unwrap();
        for ((t, p), s) in pair
            .teacher
            .values()
            .zip(prev.values())
            .zip(pair.student.values())
        {
            let (lo, hi) = if p < s { (p, s) } else { (s, p) };
            assert!(t >= lo - 1e-15 && t <= hi + 1e-15);
        }
    }
}
