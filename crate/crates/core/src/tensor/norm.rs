use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

struct GroupStats<S> {
    /// Normalized input, same layout as the input.
    xhat: Vec<S>,
    /// `1 / sqrt(var + eps)` per (sample, group).
    rstd: Vec<S>,
}

fn check<S: Scalar>(x: &Tensor<S>, groups: usize, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::dim("group_norm", format!("rank {} input", x.rank())));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::dim(
            "group_norm",
            format!("{c} channels not divisible by {groups} groups"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "group_norm",
            format!("affine shapes {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let spatial = x.numel() / (b * c);
    Ok((c, c / groups, spatial))
}

fn normalize<S: Scalar>(x: &[S], group_len: usize, eps: S) -> GroupStats<S> {
    let n = S::of(group_len as f64);
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / group_len);
    for (src, dst) in x.chunks(group_len).zip(xhat.chunks_mut(group_len)) {
        let mean = src.iter().copied().sum::<S>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let r = S::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * r;
        }
        rstd.push(r);
    }
    GroupStats { xhat, rstd }
}

fn affine<S: Scalar>(xhat: &[S], gamma: &[S], beta: &[S], spatial: usize) -> Vec<S> {
    let c = gamma.len();
    xhat.chunks(spatial)
        .enumerate()
        .flat_map(|(i, plane)| {
            let (gm, bt) = (gamma[i % c], beta[i % c]);
            plane.iter().map(move |&v| gm * v + bt)
        })
        .collect()
}

/// Group normalization over `[B, C, ...]`: each sample's channels are split
/// into `groups` groups, normalized by the group's mean and variance over
/// channels and spatial positions, then scaled and shifted per channel.
pub fn group_norm<S: Scalar>(
    x: &Tensor<S>,
    groups: usize,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let (_, cpg, spatial) = check(x, groups, gamma, beta)?;
    let stats = normalize(x.data(), cpg * spatial, eps);
    Tensor::new(x.shape(), affine(&stats.xhat, gamma.data(), beta.data(), spatial))
}

impl<S: Scalar> Tape<S> {
    pub fn group_norm(
        &mut self,
        x: &Var<S>,
        groups: usize,
        gamma: &Var<S>,
        beta: &Var<S>,
        eps: S,
    ) -> Result<Var<S>> {
        if eps <= S::zero() {
            return Err(Error::Contract("group_norm eps must be positive".into()));
        }
        let (c, cpg, spatial) = check(x.value(), groups, gamma.value(), beta.value())?;
        let group_len = cpg * spatial;
        let stats = normalize(x.value().data(), group_len, eps);
        let out = Tensor::new(
            x.shape(),
            affine(&stats.xhat, gamma.value().data(), beta.value().data(), spatial),
        )?;
        let gm = gamma.shared();
        let shape = x.shape().to_vec();
        self.record("group_norm", &[x, gamma, beta], out, move |g, needs| {
            let gd = g.data();
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for (i, (gp, xp)) in gd.chunks(spatial).zip(stats.xhat.chunks(spatial)).enumerate() {
                let ch = i % c;
                for (&d, &xh) in gp.iter().zip(xp) {
                    dgamma[ch] = dgamma[ch] + d * xh;
                    dbeta[ch] = dbeta[ch] + d;
                }
            }
            let dx = needs[0].then(|| {
                let n = S::of(group_len as f64);
                let mut dx = vec![S::zero(); gd.len()];
                let groups_total = gd.len() / group_len;
                for gi in 0..groups_total {
                    let range = gi * group_len..(gi + 1) * group_len;
                    let ch0 = (gi * cpg) % c;
                    // dxhat = dy * gamma
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    let dxhat: Vec<S> = gd[range.clone()]
                        .iter()
                        .zip(&stats.xhat[range.clone()])
                        .enumerate()
                        .map(|(j, (&d, &xh))| {
                            let v = d * gm.data()[ch0 + j / spatial];
                            sum_d = sum_d + v;
                            sum_dx = sum_dx + v * xh;
                            v
                        })
                        .collect();
                    let r = stats.rstd[gi];
                    for ((o, &dh), &xh) in dx[range.clone()]
                        .iter_mut()
                        .zip(&dxhat)
                        .zip(&stats.xhat[range])
                    {
                        *o = r / n * (n * dh - sum_d - xh * sum_dx);
                    }
                }
                Tensor::new(&shape, dx)
            });
            Ok(vec![
                dx.transpose()?,
                needs[1].then(|| Tensor::new(&[c], dgamma)).transpose()?,
                needs[2].then(|| Tensor::new(&[c], dbeta)).transpose()?,
            ])
        })
    }
}
