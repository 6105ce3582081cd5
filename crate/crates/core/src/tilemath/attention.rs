//! Single-query decode attention split over KV shards.
//!
//! Each shard produces an [`AttnPartial`] `(m, l, o)` per head, where `m` is
//! the running max score, `l = Σ exp(s - m)` and `o = Σ exp(s - m) v` is kept
//! unnormalized. Partials merge with [`combine_partials`]; the neutral
//! partial (`m = -inf, l = 0, o = 0`) is the identity. [`finalize`] divides
//! `o` by `l`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One decode step: a single query per head against a KV cache of
/// `kv_len` positions sharded evenly over `world_size` ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeProblem {
    heads: usize,
    head_dim: usize,
    kv_len: usize,
    world_size: usize,
    /// `heads x head_dim`
    q: Vec<f32>,
    /// `heads x kv_len x head_dim`
    k: Vec<f32>,
    v: Vec<f32>,
}

/// A rank's slice of the KV cache, `heads x len x head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvShard {
    pub heads: usize,
    pub head_dim: usize,
    pub len: usize,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

impl DecodeProblem {
    pub fn new(
        heads: usize,
        head_dim: usize,
        kv_len: usize,
        world_size: usize,
        q: Vec<f32>,
        k: Vec<f32>,
        v: Vec<f32>,
    ) -> Result<Self> {
        Self::check_dims(heads, head_dim, kv_len, world_size)?;
        if q.len() != heads * head_dim {
            return Err(Error::Shape(format!("q has {} elements, want {}", q.len(), heads * head_dim)));
        }
        let kv = heads * kv_len * head_dim;
        if k.len() != kv || v.len() != kv {
            return Err(Error::Shape(format!(
                "k/v have {}/{} elements, want {kv}",
                k.len(),
                v.len()
            )));
        }
        Ok(Self {
            heads,
            head_dim,
            kv_len,
            world_size,
            q,
            k,
            v,
        })
    }

    /// Seeded inputs uniform in `[-1, 1)`.
    pub fn random(heads: usize, head_dim: usize, kv_len: usize, world_size: usize, seed: u64) -> Result<Self> {
        Self::check_dims(heads, head_dim, kv_len, world_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
        let q = draw(heads * head_dim);
        let k = draw(heads * kv_len * head_dim);
        let v = draw(heads * kv_len * head_dim);
        Self::new(heads, head_dim, kv_len, world_size, q, k, v)
    }

    fn check_dims(heads: usize, head_dim: usize, kv_len: usize, world_size: usize) -> Result<()> {
        if heads == 0 || head_dim == 0 || kv_len == 0 || world_size == 0 {
            return Err(Error::Config(format!(
                "decode dims must be positive: heads={heads} head_dim={head_dim} kv_len={kv_len} world={world_size}"
            )));
        }
        if kv_len % world_size != 0 {
            return Err(Error::Config(format!(
                "kv_len {kv_len} not divisible by world size {world_size}"
            )));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn kv_len(&self) -> usize {
        self.kv_len
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn shard_len(&self) -> usize {
        self.kv_len / self.world_size
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }

    pub fn q(&self) -> &[f32] {
        &self.q
    }

    pub fn k(&self) -> &[f32] {
        &self.k
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn shard(&self, rank: usize) -> Result<KvShard> {
        if rank >= self.world_size {
            return Err(Error::Config(format!("shard {rank} of {}", self.world_size)));
        }
        let len = self.shard_len();
        let d = self.head_dim;
        let mut k = Vec::with_capacity(self.heads * len * d);
        let mut v = Vec::with_capacity(self.heads * len * d);
        for h in 0..self.heads {
            let start = (h * self.kv_len + rank * len) * d;
            k.extend_from_slice(&self.k[start..start + len * d]);
            v.extend_from_slice(&self.v[start..start + len * d]);
        }
        Ok(KvShard {
            heads: self.heads,
            head_dim: d,
            len,
            k,
            v,
        })
    }
}

/// Online-softmax state per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnPartial {
    pub heads: usize,
    pub head_dim: usize,
    pub m: Vec<f32>,
    pub l: Vec<f32>,
    /// `heads x head_dim`
    pub o: Vec<f32>,
}

impl AttnPartial {
    pub fn neutral(heads: usize, head_dim: usize) -> Self {
        Self {
            heads,
            head_dim,
            m: vec![f32::NEG_INFINITY; heads],
            l: vec![0.0; heads],
            o: vec![0.0; heads * head_dim],
        }
    }

    pub fn is_neutral(&self) -> bool {
        self.l.iter().all(|&l| l == 0.0)
    }

    pub fn head_o(&self, h: usize) -> &[f32] {
        &self.o[h * self.head_dim..(h + 1) * self.head_dim]
    }
}

/// Max, normalizer and weighted value sum for one head given its scores.
/// `values` is `scores.len() x d`. The max is rounded to `f32` before use so
/// the stored triple is self-consistent.
pub(crate) fn softmax_fold(scores: &[f64], values: &[f32], d: usize) -> (f32, f32, Vec<f32>) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) as f32;
    let shift = f64::from(m);
    let mut l = 0.0f64;
    let mut o = vec![0.0f64; d];
    for (j, &s) in scores.iter().enumerate() {
        let p = (s - shift).exp();
        l += p;
        for (acc, &x) in o.iter_mut().zip(&values[j * d..(j + 1) * d]) {
            *acc += p * f64::from(x);
        }
    }
    (m, l as f32, o.into_iter().map(|x| x as f32).collect())
}

/// Attention of the problem's query against one KV shard.
pub fn attention_partial(prob: &DecodeProblem, shard: &KvShard) -> Result<AttnPartial> {
    if shard.len == 0 {
        return Err(Error::Shape("empty KV shard".into()));
    }
    if shard.heads != prob.heads || shard.head_dim != prob.head_dim {
        return Err(Error::Shape(format!(
            "shard is {}x{}, problem is {}x{}",
            shard.heads, shard.head_dim, prob.heads, prob.head_dim
        )));
    }
    if !prob.q.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("query"));
    }
    if !shard.k.iter().chain(&shard.v).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("kv shard"));
    }
    let d = prob.head_dim;
    let scale = f64::from(prob.scale());
    let mut out = AttnPartial::neutral(prob.heads, d);
    let mut scores = vec![0.0f64; shard.len];
    for h in 0..prob.heads {
        let q = &prob.q[h * d..(h + 1) * d];
        let keys = &shard.k[h * shard.len * d..(h + 1) * shard.len * d];
        let values = &shard.v[h * shard.len * d..(h + 1) * shard.len * d];
        for (s, key) in scores.iter_mut().zip(keys.chunks_exact(d)) {
            let dot: f64 = q.iter().zip(key).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            *s = scale * dot;
        }
        let (m, l, o) = softmax_fold(&scores, values, d);
        out.m[h] = m;
        out.l[h] = l;
        out.o[h * d..(h + 1) * d].copy_from_slice(&o);
    }
    Ok(out)
}

/// Merges two partials by rescaling both to the larger max. The neutral
/// partial is an identity on either side.
pub fn combine_partials(p: &AttnPartial, q: &AttnPartial) -> Result<AttnPartial> {
    if p.heads != q.heads || p.head_dim != q.head_dim {
        return Err(Error::Shape(format!(
            "combine {}x{} with {}x{}",
            p.heads, p.head_dim, q.heads, q.head_dim
        )));
    }
    let d = p.head_dim;
    let mut out = AttnPartial::neutral(p.heads, d);
    for h in 0..p.heads {
        let range = h * d..(h + 1) * d;
        if q.l[h] == 0.0 {
            out.m[h] = p.m[h];
            out.l[h] = p.l[h];
            out.o[range.clone()].copy_from_slice(&p.o[range]);
            continue;
        }
        if p.l[h] == 0.0 {
            out.m[h] = q.m[h];
            out.l[h] = q.l[h];
            out.o[range.clone()].copy_from_slice(&q.o[range]);
            continue;
        }
        let m = p.m[h].max(q.m[h]);
        let wp = (f64::from(p.m[h]) - f64::from(m)).exp();
        let wq = (f64::from(q.m[h]) - f64::from(m)).exp();
        out.m[h] = m;
        out.l[h] = (f64::from(p.l[h]) * wp + f64::from(q.l[h]) * wq) as f32;
        for ((dst, &a), &b) in out.o[range.clone()].iter_mut().zip(&p.o[range.clone()]).zip(&q.o[range]) {
            *dst = (f64::from(a) * wp + f64::from(b) * wq) as f32;
        }
    }
    Ok(out)
}

/// Normalized attention output, `heads x head_dim`.
pub fn finalize(p: &AttnPartial) -> Result<Vec<f32>> {
    let d = p.head_dim;
    let mut out = Vec::with_capacity(p.heads * d);
    for h in 0..p.heads {
        let l = p.l[h];
        if l <= 0.0 {
            return Err(Error::EmptyAttention { head: h });
        }
        out.extend(p.head_o(h).iter().map(|&x| x / l));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn max_rel(a: &[f32], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (f64::from(x) - y).abs())
            .fold(0.0, f64::max)
            / scale
    }

    // Direct softmax over all positions of one shard, in f64.
    fn direct(prob: &DecodeProblem, shard: &KvShard) -> Vec<f64> {
        let d = prob.head_dim;
        let mut out = Vec::new();
        for h in 0..prob.heads {
            let q = &prob.q[h * d..(h + 1) * d];
            let s: Vec<f64> = (0..shard.len)
                .map(|j| {
                    let k = &shard.k[(h * shard.len + j) * d..(h * shard.len + j + 1) * d];
                    q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d {
                out.push(
                    (0..shard.len)
                        .map(|j| w[j] * shard.v[(h * shard.len + j) * d + c] as f64)
                        .sum::<f64>()
                        / z,
                );
            }
        }
        out
    }

    #[test]
    fn single_orthogonal_key() {
        let prob = DecodeProblem::new(
            1,
            2,
            1,
            1,
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.25, -0.5],
        )
        .unwrap();
        let p = attention_partial(&prob, &prob.shard(0).unwrap()).unwrap();
        assert_eq!(p.m, vec![0.0]);
        assert_eq!(p.l, vec![1.0]);
        assert_eq!(p.o, vec![0.25, -0.5]);
        assert_eq!(finalize(&p).unwrap(), vec![0.25, -0.5]);
    }

    #[test]
    fn two_identical_keys() {
        let prob = DecodeProblem::new(
            1,
            2,
            2,
            1,
            vec![0.3, -0.7],
            vec![0.5, 0.5, 0.5, 0.5],
            vec![1.0, 2.0, 1.0, 2.0],
        )
        .unwrap();
        let p = attention_partial(&prob, &prob.shard(0).unwrap()).unwrap();
        assert!((p.l[0] - 2.0).abs() <= 1e-6);
        assert!((p.o[0] - 2.0).abs() <= 1e-6 && (p.o[1] - 4.0).abs() <= 1e-6);
    }

    #[test]
    fn seeded_shard_matches_direct_softmax() {
        let prob = DecodeProblem::random(2, 4, 8, 1, 11).unwrap();
        let shard = prob.shard(0).unwrap();
        let out = finalize(&attention_partial(&prob, &shard).unwrap()).unwrap();
        assert!(max_rel(&out, &direct(&prob, &shard)) <= 1e-6);
    }

    #[test]
    fn neutral_cannot_be_finalized() {
        assert_eq!(
            finalize(&AttnPartial::neutral(2, 3)),
            Err(Error::EmptyAttention { head: 0 })
        );
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let prob = DecodeProblem::new(1, 1, 1, 1, vec![f32::NAN], vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(
            attention_partial(&prob, &prob.shard(0).unwrap()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn indivisible_kv_len_rejected() {
        assert!(DecodeProblem::random(1, 4, 10, 3, 0).is_err());
    }

    #[test]
    fn shards_tile_the_cache() {
        let prob = DecodeProblem::random(2, 3, 8, 4, 5).unwrap();
        let s1 = prob.shard(1).unwrap();
        assert_eq!(s1.len, 2);
        // head 1, shard-local position 0 is global position 2.
        assert_eq!(&s1.k[2 * 3..3 * 3], &prob.k()[(8 + 2) * 3..(8 + 3) * 3]);
        assert!(prob.shard(4).is_err());
    }

    #[test]
    fn split_partials_fold_to_full_softmax() {
        let whole = DecodeProblem::random(3, 8, 48, 1, 21).unwrap();
        let expect = direct(&whole, &whole.shard(0).unwrap());
        let split = DecodeProblem::new(3, 8, 48, 4, whole.q.clone(), whole.k.clone(), whole.v.clone()).unwrap();
        let parts: Vec<_> = (0..4)
            .map(|r| attention_partial(&split, &split.shard(r).unwrap()).unwrap())
            .collect();
        for order in [[0, 1, 2, 3], [3, 1, 0, 2], [2, 3, 1, 0]] {
            let acc = order.iter().fold(AttnPartial::neutral(3, 8), |acc, &i| {
                combine_partials(&acc, &parts[i]).unwrap()
            });
            assert!(max_rel(&finalize(&acc).unwrap(), &expect) <= 1e-5);
        }
    }

    #[test]
    fn normalizer_is_conserved() {
        let prob = DecodeProblem::random(2, 4, 64, 4, 8).unwrap();
        let acc = (0..4).fold(AttnPartial::neutral(2, 4), |acc, r| {
            let p = attention_partial(&prob, &prob.shard(r).unwrap()).unwrap();
            combine_partials(&acc, &p).unwrap()
        });
        for h in 0..2 {
            let q = &prob.q[h * 4..(h + 1) * 4];
            let s: Vec<f64> = (0..64)
                .map(|j| {
                    let k = &prob.k[(h * 64 + j) * 4..(h * 64 + j + 1) * 4];
                    q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * 0.5
                })
                .collect();
            let gm = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expect: f64 = s.iter().map(|x| (x - gm).exp()).sum();
            // The fold shifts by the f32-rounded max; rescale to the exact one.
            let got = acc.l[h] as f64 * (acc.m[h] as f64 - gm).exp();
            assert!(((got - expect) / expect).abs() <= 1e-6, "{got} vs {expect}");
        }
    }

    #[test]
    fn shape_mismatch_on_combine() {
        assert!(combine_partials(&AttnPartial::neutral(1, 2), &AttnPartial::neutral(2, 2)).is_err());
    }

    proptest! {
        // Adding a constant to every score must not change the normalized
        // output.
        #[test]
        fn shift_stable(
            scores in prop::collection::vec(-5.0f64..5.0, 1..16),
            shift in -50.0f64..50.0,
            seed in any::<u64>(),
        ) {
            let d = 3;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..scores.len() * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let norm = |(_, l, o): (f32, f32, Vec<f32>)| o.into_iter().map(move |x| x / l).collect::<Vec<_>>();
            let a = norm(softmax_fold(&scores, &values, d));
            let b: Vec<f64> = norm(softmax_fold(&shifted, &values, d)).into_iter().map(f64::from).collect();
            prop_assert!(max_rel(&a, &b) <= 1e-5);
        }
    }
}
