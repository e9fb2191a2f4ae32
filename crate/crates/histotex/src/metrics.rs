//! Classification metrics and cluster validity.

use crate::error::{Error, Result};
use crate::textures::ClassTable;
use crate::Elem;

/// Label factor to score against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    /// The joint class.
    Both,
    Statistical,
    Structural,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Both, Factor::Statistical, Factor::Structural];

    pub fn name(&self) -> &'static str {
        match self {
            Factor::Both => "both",
            Factor::Statistical => "statistical",
            Factor::Structural => "structural",
        }
    }

    /// Project a joint class id onto this factor's label set.
    pub fn project(&self, joint: usize, table: &ClassTable) -> usize {
        match self {
            Factor::Both => joint,
            Factor::Statistical => table.joint_to_statistical[joint],
            Factor::Structural => table.joint_to_structural[joint],
        }
    }

    pub fn label_names<'a>(&self, table: &'a ClassTable) -> &'a [String] {
        match self {
            Factor::Both => &table.joint_names,
            Factor::Statistical => &table.statistical_names,
            Factor::Structural => &table.structural_names,
        }
    }
}

/// Row = true label, column = predicted label, counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(
        truths: &[usize],
        preds: &[usize],
        labels: &[String],
    ) -> Result<Self> {
        if truths.len() != preds.len() {
            return Err(Error::Input(format!(
                "{} truths vs {} predictions",
                truths.len(),
                preds.len()
            )));
        }
        let k = labels.len();
        let mut counts = vec![vec![0usize; k]; k];
        for (&t, &p) in truths.iter().zip(preds) {
            if t >= k || p >= k {
                return Err(Error::Input(format!("label {}/{} out of range {}", t, p, k)));
            }
            counts[t][p] += 1;
        }
        Ok(Self { labels: labels.to_vec(), counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|row| row.iter().sum::<usize>()).sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Accuracy in percent; trace over total, exactly.
    pub fn accuracy(&self) -> Elem {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        100.0 * self.trace() as Elem / total as Elem
    }

    /// CSV with a header row and, after the raw counts, row-normalized
    /// percentages labeled as such.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&self.labels[i]);
            for c in row {
                out.push_str(&format!(",{}", c));
            }
            out.push('\n');
        }
        out.push_str("# row-normalized percentages\n");
        for (i, row) in self.counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            out.push_str(&self.labels[i]);
            for c in row {
                if total == 0 {
                    out.push_str(",0");
                } else {
                    out.push_str(&format!(",{:.2}", 100.0 * *c as f64 / total as f64));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Accuracy (percent) of joint predictions projected onto a factor.
pub fn factor_accuracy(
    truths_joint: &[usize],
    preds_joint: &[usize],
    table: &ClassTable,
    factor: Factor,
) -> Result<Elem> {
    let (t, p) = project_pairs(truths_joint, preds_joint, table, factor)?;
    let correct = t.iter().zip(&p).filter(|(a, b)| a == b).count();
    if t.is_empty() {
        return Ok(0.0);
    }
    Ok(100.0 * correct as Elem / t.len() as Elem)
}

/// Confusion matrix over a factor's label set.
pub fn factor_confusion(
    truths_joint: &[usize],
    preds_joint: &[usize],
    table: &ClassTable,
    factor: Factor,
) -> Result<ConfusionMatrix> {
    let (t, p) = project_pairs(truths_joint, preds_joint, table, factor)?;
    ConfusionMatrix::from_predictions(&t, &p, factor.label_names(table))
}

fn project_pairs(
    truths: &[usize],
    preds: &[usize],
    table: &ClassTable,
    factor: Factor,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if truths.len() != preds.len() {
        return Err(Error::Input(format!(
            "{} truths vs {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    let k = table.num_classes();
    if let Some(&bad) = truths.iter().chain(preds).find(|&&v| v >= k) {
        return Err(Error::Input(format!("joint label {} out of range {}", bad, k)));
    }
    Ok((
        truths.iter().map(|&j| factor.project(j, table)).collect(),
        preds.iter().map(|&j| factor.project(j, table)).collect(),
    ))
}

/// Calinski-Harabasz index: between-class scatter over within-class
/// scatter, each normalized by its degrees of freedom. Larger values mean
/// more compact, better separated classes. Zero within-class scatter yields
/// `+inf` (reported, not an error): degenerate perfect features can occur
/// on tiny sets.
pub fn calinski_harabasz(features: &[Vec<Elem>], labels: &[usize]) -> Result<Elem> {
    let n = features.len();
    if n != labels.len() {
        return Err(Error::Input(format!("{} feature rows vs {} labels", n, labels.len())));
    }
    if n == 0 {
        return Err(Error::Input("no samples".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Input("feature rows have inconsistent widths".into()));
    }
    let k = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    let mut class_counts = vec![0usize; k];
    for &l in labels {
        class_counts[l] += 1;
    }
    let distinct = class_counts.iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(Error::Input(format!("need at least 2 distinct labels, got {}", distinct)));
    }
    if class_counts.iter().any(|&c| c == 0) {
        return Err(Error::Input("labels must be dense 0..k with every class non-empty".into()));
    }
    if n <= k {
        return Err(Error::Input(format!("need more samples ({}) than classes ({})", n, k)));
    }

    let mut overall = vec![0.0 as Elem; dim];
    let mut class_means = vec![vec![0.0 as Elem; dim]; k];
    for (f, &l) in features.iter().zip(labels) {
        for (j, &v) in f.iter().enumerate() {
            overall[j] += v;
            class_means[l][j] += v;
        }
    }
    for v in overall.iter_mut() {
        *v /= n as Elem;
    }
    for (mean, &count) in class_means.iter_mut().zip(&class_counts) {
        for v in mean.iter_mut() {
            *v /= count as Elem;
        }
    }

    // trace(B) = sum_c n_c ||mean_c - overall||^2
    let mut between = 0.0;
    for (mean, &count) in class_means.iter().zip(&class_counts) {
        let mut d2 = 0.0;
        for j in 0..dim {
            let d = mean[j] - overall[j];
            d2 += d * d;
        }
        between += count as Elem * d2;
    }
    // trace(W) = sum_i ||x_i - mean_{class(i)}||^2
    let mut within = 0.0;
    for (f, &l) in features.iter().zip(labels) {
        for j in 0..dim {
            let d = f[j] - class_means[l][j];
            within += d * d;
        }
    }

    let b_term = between / (k as Elem - 1.0);
    if within == 0.0 {
        return Ok(if b_term == 0.0 { 0.0 } else { Elem::INFINITY });
    }
    let w_term = within / (n - k) as Elem;
    Ok(b_term / w_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::textures::{grid6_class_specs, ClassSpec, ClassTable};
    use rand::Rng as _;

    fn grid6_table() -> ClassTable {
        let specs: Vec<ClassSpec> = grid6_class_specs((8, 8))
            .iter()
            .map(|t| ClassSpec { structural: t.structural, statistical: t.statistical })
            .collect();
        ClassTable::from_specs(&specs).unwrap()
    }

    #[test]
    fn ch_hand_oracle_is_200() {
        // 1-D points {0,1,10,11} labeled {a,a,b,b}:
        // overall mean 5.5, class means 0.5 and 10.5,
        // B = 2*25 + 2*25 = 100, W = 4*0.25 = 1,
        // CH = (100/1)/(1/2) = 200 exactly.
        let features = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        let labels = vec![0, 0, 1, 1];
        assert_eq!(calinski_harabasz(&features, &labels).unwrap(), 200.0);
    }

    #[test]
    fn ch_identical_clouds_scores_zero() {
        let features = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![1.0, 2.0], vec![3.0, 4.0]];
        let labels = vec![0, 0, 1, 1];
        assert_eq!(calinski_harabasz(&features, &labels).unwrap(), 0.0);
    }

    #[test]
    fn ch_zero_within_scatter_is_infinite() {
        let features = vec![vec![0.0], vec![0.0], vec![5.0], vec![5.0]];
        let labels = vec![0, 0, 1, 1];
        assert_eq!(calinski_harabasz(&features, &labels).unwrap(), Elem::INFINITY);
    }

    #[test]
    fn ch_structure_raises_score() {
        let mut rng = rng_from_seed(4);
        let n = 200;
        let k = 4;
        let dim = 8;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let noise: Vec<Vec<Elem>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen::<f64>() as Elem - 0.5).collect())
            .collect();
        let unstructured = calinski_harabasz(&noise, &labels).unwrap();
        assert!(unstructured < 10.0, "no-structure CH {}", unstructured);

        // Shift class means far apart: CH must react strongly.
        let shifted: Vec<Vec<Elem>> = noise
            .iter()
            .zip(&labels)
            .map(|(f, &l)| {
                let mut f = f.clone();
                f[0] += (l as Elem) * 10.0;
                f
            })
            .collect();
        let structured = calinski_harabasz(&shifted, &labels).unwrap();
        assert!(structured > 50.0, "structured CH {}", structured);
    }

    #[test]
    fn ch_invariances() {
        let mut rng = rng_from_seed(9);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let feats: Vec<Vec<Elem>> = (0..n)
            .map(|i| {
                let base = (labels[i] as Elem) * 2.0;
                vec![
                    base + rng.gen::<f64>() as Elem,
                    rng.gen::<f64>() as Elem,
                    base - rng.gen::<f64>() as Elem,
                ]
            })
            .collect();
        let base_score = calinski_harabasz(&feats, &labels).unwrap();

        // Rotation invariance: apply a few Givens rotations.
        let mut rotated = feats.clone();
        for (i, j, angle) in [(0usize, 1usize, 0.7), (1, 2, -1.1), (0, 2, 0.3)] {
            let (s, c) = (angle as Elem).sin_cos();
            for f in rotated.iter_mut() {
                let (a, b) = (f[i], f[j]);
                f[i] = c * a - s * b;
                f[j] = s * a + c * b;
            }
        }
        let rotated_score = calinski_harabasz(&rotated, &labels).unwrap();
        assert!(
            (rotated_score - base_score).abs() <= 1e-9 * base_score.abs().max(1.0),
            "rotation changed CH: {} vs {}",
            base_score,
            rotated_score
        );

        // Relabeling permutation invariance.
        let perm = [2usize, 0, 1];
        let permuted: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let permuted_score = calinski_harabasz(&feats, &permuted).unwrap();
        assert!((permuted_score - base_score).abs() <= 1e-9 * base_score.abs().max(1.0));
    }

    #[test]
    fn ch_rejects_single_class() {
        let features = vec![vec![0.0], vec![1.0]];
        assert!(matches!(calinski_harabasz(&features, &[0, 0]), Err(Error::Input(_))));
    }

    #[test]
    fn perfect_predictions_score_100_on_all_factors() {
        let table = grid6_table();
        let truths: Vec<usize> = (0..60).map(|i| i % 6).collect();
        for f in Factor::ALL {
            assert_eq!(factor_accuracy(&truths, &truths, &table, f).unwrap(), 100.0);
        }
    }

    #[test]
    fn structurally_right_statistically_wrong() {
        // Predict the right structural kind but rotate the statistical label.
        let table = grid6_table();
        let truths: Vec<usize> = (0..60).map(|i| i % 6).collect();
        // Classes are ordered structural-major: 3 statisticals per structural.
        let preds: Vec<usize> =
            truths.iter().map(|&j| (j / 3) * 3 + (j % 3 + 1) % 3).collect();
        let s = factor_accuracy(&truths, &preds, &table, Factor::Structural).unwrap();
        let t = factor_accuracy(&truths, &preds, &table, Factor::Statistical).unwrap();
        let b = factor_accuracy(&truths, &preds, &table, Factor::Both).unwrap();
        assert_eq!(s, 100.0);
        assert_eq!(t, 0.0);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn random_predictions_hit_chance_levels() {
        let table = grid6_table();
        let mut rng = rng_from_seed(123);
        let n = 10_000;
        let truths: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let b = factor_accuracy(&truths, &preds, &table, Factor::Both).unwrap();
        let s = factor_accuracy(&truths, &preds, &table, Factor::Structural).unwrap();
        let t = factor_accuracy(&truths, &preds, &table, Factor::Statistical).unwrap();
        assert!((b - 100.0 / 6.0).abs() < 3.0, "both {}", b);
        assert!((s - 50.0).abs() < 3.0, "structural {}", s);
        assert!((t - 100.0 / 3.0).abs() < 3.0, "statistical {}", t);
    }

    #[test]
    fn coarsening_cannot_reduce_accuracy() {
        let table = grid6_table();
        let mut rng = rng_from_seed(7);
        for _ in 0..50 {
            let n = 40;
            let truths: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
            let b = factor_accuracy(&truths, &preds, &table, Factor::Both).unwrap();
            for f in [Factor::Statistical, Factor::Structural] {
                let a = factor_accuracy(&truths, &preds, &table, f).unwrap();
                assert!(a >= b, "{} accuracy {} below joint {}", f.name(), a, b);
            }
        }
    }

    #[test]
    fn confusion_trace_over_total_equals_accuracy() {
        let table = grid6_table();
        let mut rng = rng_from_seed(17);
        let n = 300;
        let truths: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let cm = factor_confusion(&truths, &preds, &table, Factor::Both).unwrap();
        let acc = factor_accuracy(&truths, &preds, &table, Factor::Both).unwrap();
        assert_eq!(cm.accuracy(), acc);
        assert_eq!(cm.total(), n);
        // Row sums equal per-class true counts.
        for (i, row) in cm.counts.iter().enumerate() {
            let expect = truths.iter().filter(|&&t| t == i).count();
            assert_eq!(row.iter().sum::<usize>(), expect);
        }
    }
}
