//! Batch triplet mining and the hinge triplet loss.
//!
//! Every security sample in a batch anchors one triplet (or a single random
//! one with [`AnchorMode::RandomOne`]). Its positive is the farthest other
//! security sample and its negative the closest non-security sample, both
//! under Euclidean distance, ties going to the lower batch index.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    #[default]
    All,
    RandomOne,
}

pub fn euclidean_distance(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

fn check_batch(batch: &[DVector<f64>], labels: &[Label]) -> Result<()> {
    if batch.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: batch.len(),
            right: labels.len(),
        });
    }
    if let Some(first) = batch.first() {
        if let Some(bad) = batch.iter().find(|e| e.len() != first.len()) {
            return Err(Error::LengthMismatch {
                left: first.len(),
                right: bad.len(),
            });
        }
    }
    let security = labels.iter().filter(|l| l.is_security()).count();
    if security < 2 {
        return Err(Error::InsufficientClassMembers {
            class: Label::Security,
            required: 2,
            found: security,
        });
    }
    if security == labels.len() {
        return Err(Error::InsufficientClassMembers {
            class: Label::NonSecurity,
            required: 1,
            found: 0,
        });
    }
    Ok(())
}

fn hardest_for(anchor: usize, batch: &[DVector<f64>], labels: &[Label]) -> Triplet {
    let dist = |j: usize| (&batch[anchor] - &batch[j]).norm();
    let mut positive: Option<(usize, f64)> = None;
    let mut negative: Option<(usize, f64)> = None;
    for (j, label) in labels.iter().enumerate() {
        if j == anchor {
            continue;
        }
        let d = dist(j);
        if label.is_security() {
            if positive.is_none_or(|(_, best)| d > best) {
                positive = Some((j, d));
            }
        } else if negative.is_none_or(|(_, best)| d < best) {
            negative = Some((j, d));
        }
    }
    Triplet {
        anchor,
        positive: positive.expect("checked: two security samples").0,
        negative: negative.expect("checked: one non-security sample").0,
    }
}

/// Mines one triplet per anchor, anchors in batch order.
pub fn mine_triplets(
    batch: &[DVector<f64>],
    labels: &[Label],
    mode: AnchorMode,
    rng: &mut impl Rng,
) -> Result<Vec<Triplet>> {
    check_batch(batch, labels)?;
    let anchors: Vec<usize> = (0..batch.len()).filter(|&i| labels[i].is_security()).collect();
    let chosen = match mode {
        AnchorMode::All => anchors,
        AnchorMode::RandomOne => vec![anchors[rng.random_range(0..anchors.len())]],
    };
    Ok(chosen
        .into_iter()
        .map(|a| hardest_for(a, batch, labels))
        .collect())
}

/// `max(0, d(a,p) - d(a,n) + margin)`.
pub fn triplet_loss(a: &DVector<f64>, p: &DVector<f64>, n: &DVector<f64>, margin: f64) -> f64 {
    let ap = (a - p).norm();
    let an = (a - n).norm();
    (ap - an + margin).max(0.0)
}

#[derive(Debug, Clone)]
pub struct SbclOutput {
    /// Mean hinge loss over the mined triplets.
    pub loss: f64,
    pub triplets: Vec<Triplet>,
    pub triplet_losses: Vec<f64>,
    /// Hinge arguments `d(a,p) - d(a,n) + margin`, before clamping.
    pub margins: Vec<f64>,
    /// Gradient of `loss` with respect to each batch embedding.
    pub grads: Vec<DVector<f64>>,
}

/// Unit direction `(x - y)/|x - y|`, zero when the points coincide.
fn unit_diff(x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let diff = x - y;
    let norm = diff.norm();
    if norm > 0.0 {
        diff / norm
    } else {
        DVector::zeros(x.len())
    }
}

/// Loss and embedding gradients for an already mined set of triplets.
/// Inactive hinges (argument ≤ 0) contribute zero gradient.
pub fn triplet_objective(batch: &[DVector<f64>], triplets: &[Triplet], margin: f64) -> SbclOutput {
    let dim = batch.first().map_or(0, |e| e.len());
    let mut grads = vec![DVector::zeros(dim); batch.len()];
    let mut triplet_losses = Vec::with_capacity(triplets.len());
    let mut margins = Vec::with_capacity(triplets.len());
    let count = triplets.len().max(1) as f64;
    for t in triplets {
        let (a, p, n) = (&batch[t.anchor], &batch[t.positive], &batch[t.negative]);
        let arg = (a - p).norm() - (a - n).norm() + margin;
        margins.push(arg);
        triplet_losses.push(arg.max(0.0));
        if arg > 0.0 {
            let u_ap = unit_diff(a, p);
            let u_an = unit_diff(a, n);
            grads[t.anchor] += (&u_ap - &u_an) / count;
            grads[t.positive] -= &u_ap / count;
            grads[t.negative] += &u_an / count;
        }
    }
    let loss = if triplets.is_empty() {
        0.0
    } else {
        triplet_losses.iter().sum::<f64>() / triplets.len() as f64
    };
    SbclOutput {
        loss,
        triplets: triplets.to_vec(),
        triplet_losses,
        margins,
        grads,
    }
}

/// Mines triplets, then averages their hinge losses.
pub fn sbcl_batch_loss(
    batch: &[DVector<f64>],
    labels: &[Label],
    margin: f64,
    mode: AnchorMode,
    rng: &mut impl Rng,
) -> Result<SbclOutput> {
    let triplets = mine_triplets(batch, labels, mode, rng)?;
    Ok(triplet_objective(batch, &triplets, margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Label::{NonSecurity as N, Security as S};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn three_four_five() {
        assert_eq!(euclidean_distance(&v(&[0.0; 4]), &v(&[3.0, 4.0, 0.0, 0.0])).unwrap(), 5.0);
        let x = v(&[1.5, -2.0, 7.25]);
        assert_eq!(euclidean_distance(&x, &x).unwrap(), 0.0);
        assert!(matches!(
            euclidean_distance(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn distance_matches_scalar_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let a: DVector<f64> = DVector::from_fn(12, |_, _| r.random_range(-3.0..3.0));
        let b: DVector<f64> = DVector::from_fn(12, |_, _| r.random_range(-3.0..3.0));
        let mut acc = 0.0f64;
        for i in 0..12 {
            acc += (a[i] - b[i]).powi(2);
        }
        assert!((euclidean_distance(&a, &b).unwrap() - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mines_the_constructed_triplet() {
        // a at origin, b at distance 2, negatives c at 0.5 and d at 3
        let batch = vec![v(&[0.0, 0.0]), v(&[2.0, 0.0]), v(&[0.0, 0.5]), v(&[0.0, -3.0])];
        let labels = [S, S, N, N];
        let triplets = mine_triplets(&batch, &labels, AnchorMode::All, &mut rng()).unwrap();
        assert_eq!(
            triplets[0],
            Triplet {
                anchor: 0,
                positive: 1,
                negative: 2
            }
        );
        assert_eq!(triplets.len(), 2);
        assert_eq!(triplets[1].anchor, 1);
    }

    #[test]
    fn needs_two_security_and_one_other() {
        let batch = vec![v(&[0.0]), v(&[1.0]), v(&[2.0])];
        match mine_triplets(&batch, &[S, N, N], AnchorMode::All, &mut rng()) {
            Err(Error::InsufficientClassMembers { class, found, .. }) => {
                assert_eq!(class, S);
                assert_eq!(found, 1);
            }
            other => panic!("{other:?}"),
        }
        match mine_triplets(&batch, &[S, S, S], AnchorMode::All, &mut rng()) {
            Err(Error::InsufficientClassMembers { class, .. }) => assert_eq!(class, N),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equidistant_negatives_take_lower_index() {
        let batch = vec![v(&[0.0, 0.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[0.0, -1.0])];
        let t = mine_triplets(&batch, &[S, S, N, N], AnchorMode::All, &mut rng()).unwrap();
        assert_eq!(t[0].negative, 2);
    }

    #[test]
    fn random_one_picks_a_single_security_anchor() {
        let batch = vec![v(&[0.0]), v(&[1.0]), v(&[2.0]), v(&[5.0])];
        let labels = [S, N, S, S];
        let t = mine_triplets(&batch, &labels, AnchorMode::RandomOne, &mut rng()).unwrap();
        assert_eq!(t.len(), 1);
        assert!(labels[t[0].anchor].is_security());
    }

    #[test]
    fn hinge_values() {
        // d(a,p)=0.2, d(a,n)=1.0
        let a = v(&[0.0, 0.0]);
        assert_eq!(triplet_loss(&a, &v(&[0.2, 0.0]), &v(&[0.0, 1.0]), 0.5), 0.0);
        // d(a,p)=0.9, d(a,n)=0.3
        let l = triplet_loss(&a, &v(&[0.0, 0.9]), &v(&[0.3, 0.0]), 0.5);
        assert!((l - 1.1).abs() < 1e-12);
        assert_eq!(triplet_loss(&a, &a, &v(&[0.0, 0.6]), 0.5), 0.0);
    }

    #[test]
    fn separated_batch_has_zero_loss() {
        let batch = vec![v(&[1.0, 1.0]), v(&[1.0, 1.0]), v(&[9.0, 9.0]), v(&[-9.0, 9.0])];
        let out = sbcl_batch_loss(&batch, &[S, S, N, N], 0.5, AnchorMode::All, &mut rng()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn loss_is_mean_over_triplets() {
        // anchor 0: d(a,p)=0.9 (to 1), d(a,n)=1.0 (to 2): loss 0.4
        // anchor 1: d(b,a)=0.9, d(b,n)=sqrt(0.81+1)=1.345...: loss 0.9-1.345+0.5 = 0.0546
        let batch = vec![v(&[0.0, 0.0]), v(&[0.9, 0.0]), v(&[0.0, 1.0])];
        let out = triplet_objective(
            &batch,
            &[Triplet { anchor: 0, positive: 1, negative: 2 }],
            0.5,
        );
        assert!((out.loss - 0.4).abs() < 1e-12);
        let far = vec![v(&[0.0, 0.0]), v(&[0.9, 0.0]), v(&[0.0, 1.0]), v(&[0.0, 10.0])];
        let two = triplet_objective(
            &far,
            &[
                Triplet { anchor: 0, positive: 1, negative: 2 },
                Triplet { anchor: 0, positive: 0, negative: 3 },
            ],
            0.5,
        );
        assert_eq!(two.triplet_losses[1], 0.0);
        assert!((two.loss - 0.2).abs() < 1e-12);
    }

    fn brute_force(batch: &[DVector<f64>], labels: &[Label]) -> Vec<Triplet> {
        let d = |i: usize, j: usize| {
            let acc: f64 = batch[i].iter().zip(batch[j].iter()).map(|(a, b)| (a - b).powi(2)).sum();
            acc.sqrt()
        };
        let mut out = Vec::new();
        for a in 0..batch.len() {
            if !labels[a].is_security() {
                continue;
            }
            let pos: Vec<usize> = (0..batch.len()).filter(|&j| j != a && labels[j].is_security()).collect();
            let neg: Vec<usize> = (0..batch.len()).filter(|&j| !labels[j].is_security()).collect();
            let max_d = pos.iter().map(|&j| d(a, j)).fold(f64::MIN, f64::max);
            let min_d = neg.iter().map(|&j| d(a, j)).fold(f64::MAX, f64::min);
            let positive = *pos.iter().find(|&&j| d(a, j) == max_d).unwrap();
            let negative = *neg.iter().find(|&&j| d(a, j) == min_d).unwrap();
            out.push(Triplet { anchor: a, positive, negative });
        }
        out
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<DVector<f64>>, Vec<Label>)> {
        (3usize..=12, 1usize..=6).prop_flat_map(|(n, dim)| {
            (
                proptest::collection::vec(proptest::collection::vec(-4i32..=4, dim), n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_filter_map("needs 2 security and 1 non-security", |(rows, flags)| {
                    let sec = flags.iter().filter(|f| **f).count();
                    if sec < 2 || sec == flags.len() {
                        return None;
                    }
                    // coarse integer grid so ties actually happen
                    let batch = rows
                        .into_iter()
                        .map(|r| DVector::from_iterator(r.len(), r.into_iter().map(|x| x as f64 * 0.5)))
                        .collect();
                    let labels = flags.into_iter().map(|f| if f { S } else { N }).collect();
                    Some((batch, labels))
                })
        })
    }

    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy};

    proptest! {
        #[test]
        fn mining_equals_exhaustive_search((batch, labels) in arb_batch()) {
            let mined = mine_triplets(&batch, &labels, AnchorMode::All, &mut rng()).unwrap();
            prop_assert_eq!(mined, brute_force(&batch, &labels));
        }

        #[test]
        fn loss_identities((batch, labels) in arb_batch(), margin in 0.0f64..2.0, extra in 0.0f64..1.0) {
            let out = sbcl_batch_loss(&batch, &labels, margin, AnchorMode::All, &mut rng()).unwrap();
            prop_assert!(out.loss >= 0.0);
            let satisfied = out.triplets.iter().all(|t| {
                let a = &batch[t.anchor];
                (a - &batch[t.negative]).norm() >= (a - &batch[t.positive]).norm() + margin
            });
            prop_assert_eq!(out.loss == 0.0, satisfied);
            let wider = triplet_objective(&batch, &out.triplets, margin + extra);
            prop_assert!(wider.loss >= out.loss);
        }

        #[test]
        fn mining_ignores_non_anchor_order((batch, labels) in arb_batch(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            // Permute only the non-security positions; the anchor set keeps its order.
            let non: Vec<usize> = (0..batch.len()).filter(|&i| !labels[i].is_security()).collect();
            let mut shuffled = non.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut perm: Vec<usize> = (0..batch.len()).collect();
            for (from, to) in non.iter().zip(&shuffled) {
                perm[*from] = *to;
            }
            let mut moved = batch.clone();
            for (i, e) in batch.iter().enumerate() {
                moved[perm[i]] = e.clone();
            }
            let original = mine_triplets(&batch, &labels, AnchorMode::All, &mut rng()).unwrap();
            let permuted = mine_triplets(&moved, &labels, AnchorMode::All, &mut rng()).unwrap();
            for (o, p) in original.iter().zip(&permuted) {
                prop_assert_eq!(o.anchor, p.anchor);
                prop_assert_eq!(o.positive, p.positive);
                // Tied negatives may resolve differently after a move; compare distances.
                let d_o = (&batch[o.anchor] - &batch[o.negative]).norm();
                let d_p = (&moved[p.anchor] - &moved[p.negative]).norm();
                prop_assert_eq!(d_o, d_p);
            }
        }
    }
}
