use super::ssim::ssim;
use crate::error::{contract, Result};
use crate::tensor::Var;

fn same_shape(op: &str, vars: &[Var<'_>]) -> Result<()> {
    let s = vars[0].shape();
    if let Some(v) = vars.iter().find(|v| v.shape() != s) {
        return contract(format!("{op}: shape mismatch between {s:?} and {:?}", v.shape()));
    }
    if s.len() != 3 {
        return contract(format!("{op}: expected [C, H, W] layers, got {s:?}"));
    }
    Ok(())
}

/// lambda_l1 * (|A - A^| + |S - S^| + |A*S - I|) + lambda_ssim * (three SSIM dissimilarities),
/// with L1 norms taken as means. Terms involving `a_gt` are dropped when it is `None`.
pub fn reconstruction_loss<'g>(
    a: Var<'g>,
    s: Var<'g>,
    image: Var<'g>,
    a_gt: Option<Var<'g>>,
    s_gt: Var<'g>,
    lambda_l1: f64,
    lambda_ssim: f64,
) -> Result<Var<'g>> {
    let mut all = vec![a, s, image, s_gt];
    all.extend(a_gt);
    same_shape("reconstruction_loss", &all)?;
    let product = a.mul(s)?;
    let mut pairs = vec![(s, s_gt), (product, image)];
    if let Some(a_gt) = a_gt {
        pairs.insert(0, (a, a_gt));
    }
    let mut l1 = a.graph().scalar(0.0);
    let mut dissim = a.graph().scalar(0.0);
    for (x, y) in pairs {
        l1 = l1.add(x.sub(y)?.abs()?.mean()?)?;
        if lambda_ssim != 0.0 {
            dissim = dissim.add(ssim(x, y)?.rsub(1.0)?)?;
        }
    }
    Ok(l1.scale(lambda_l1)?.add(dissim.scale(lambda_ssim)?)?)
}

/// Forward differences along x and y with replicated borders (the last difference is 0).
pub fn image_gradients<'g>(x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let dx = x.pad_replicate(0, 0, 0, 1)?.slice(vec![(0, c), (0, h), (1, w + 1)])?.sub(x)?;
    let dy = x.pad_replicate(0, 1, 0, 0)?.slice(vec![(0, c), (1, h + 1), (0, w)])?.sub(x)?;
    Ok((dx, dy))
}

/// Mean squared difference of image gradients for albedo (when `a_gt` is given) and shading.
pub fn gradient_loss<'g>(a: Var<'g>, a_gt: Option<Var<'g>>, s: Var<'g>, s_gt: Var<'g>) -> Result<Var<'g>> {
    let mut all = vec![a, s, s_gt];
    all.extend(a_gt);
    same_shape("gradient_loss", &all)?;
    let mut total = a.graph().scalar(0.0);
    let mut pairs = vec![(s, s_gt)];
    if let Some(a_gt) = a_gt {
        pairs.insert(0, (a, a_gt));
    }
    for (x, y) in pairs {
        let (dx, dy) = image_gradients(x.sub(y)?)?;
        total = total.add(dx.square()?.mean()?)?.add(dy.square()?.mean()?)?;
    }
    Ok(total)
}
