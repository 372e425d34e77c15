//! A convolution whose kernel is `Θs + ΔΘ(x)` per instance.

use crate::error::{Error, Result};
use crate::ops::{conv_backward_geom, conv_forward_geom, ConvGeometry};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

use super::adjuster::{AdjusterCache, MetaAdjuster};
use super::templates::{assemble_from_embedded, embed_templates, KernelTemplateSet};

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicConvLayer<T> {
    pub static_kernel: Param<T>,
    pub templates: KernelTemplateSet<T>,
    pub adjuster: MetaAdjuster<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Saved forward state of one [`DynamicConvLayer`] call.
#[derive(Debug, Clone)]
pub struct DynamicConvCache<T> {
    input: Tensor<T>,
    /// Per-sample kernels stacked as `[B*Cout, Cin, k, k]`.
    kernels: Tensor<T>,
    embedded: Vec<Tensor<T>>,
    adjuster: AdjusterCache<T>,
    geom: ConvGeometry,
}

impl<T: Scalar> DynamicConvCache<T> {
    /// The coefficients `λ(x)` of the batch, `[B,N]`.
    pub fn coefficients(&self) -> &Tensor<T> {
        &self.adjuster.coeffs
    }

    /// Per-instance kernels, `[B*Cout, Cin, k, k]`.
    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }
}

#[derive(Debug, Clone)]
pub struct DynamicConvGrads<T> {
    pub input: Tensor<T>,
    /// Gradient reaching the adjuster's embedding input. When the embedding
    /// is the conv input itself, add this to `input`.
    pub embedding: Tensor<T>,
    pub static_kernel: Tensor<T>,
    pub templates: Vec<Tensor<T>>,
    pub adjuster_w1: Tensor<T>,
    pub adjuster_b1: Tensor<T>,
    pub adjuster_w2: Tensor<T>,
    pub adjuster_b2: Tensor<T>,
    /// `dL/dλ`, `[B,N]`.
    pub coefficients: Tensor<T>,
}

impl<T: Scalar> DynamicConvLayer<T> {
    pub fn new(
        static_kernel: Tensor<T>,
        templates: KernelTemplateSet<T>,
        adjuster: MetaAdjuster<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let op = "DynamicConvLayer";
        if static_kernel.shape() != templates.full_dims() {
            return Err(Error::shape(
                op,
                "static kernel vs template full shape",
                format!("{:?} vs {:?}", static_kernel.shape(), templates.full_dims()),
            ));
        }
        if adjuster.outputs() != templates.len() {
            return Err(Error::shape(
                op,
                "adjuster outputs vs template count",
                format!("{} vs {}", adjuster.outputs(), templates.len()),
            ));
        }
        if stride == 0 {
            return Err(Error::Validation(format!("{op}: stride must be >= 1")));
        }
        Ok(DynamicConvLayer {
            static_kernel: Param::new(static_kernel),
            templates,
            adjuster,
            stride,
            padding,
        })
    }

    pub fn param_count(&self) -> usize {
        self.static_kernel.len() + self.templates.param_count() + self.adjuster.param_count()
    }

    fn grouped_geometry(&self, input: &Tensor<T>) -> Result<ConvGeometry> {
        let per = ConvGeometry::new(
            "dynamic_conv_forward",
            input,
            &self.static_kernel.value,
            self.stride,
            self.padding,
            1,
        )?;
        // [B,Cin,H,W] read as [1, B*Cin, H, W] with one group per instance.
        Ok(ConvGeometry {
            batch: 1,
            in_c: per.batch * per.in_c,
            out_c: per.batch * per.out_c,
            groups: per.batch,
            ..per
        })
    }

    /// Forward with a separate adjuster embedding (`[B,E,h,w]`).
    pub fn forward(&self, input: &Tensor<T>, embedding: &Tensor<T>) -> Result<(Tensor<T>, DynamicConvCache<T>)> {
        let op = "dynamic_conv_forward";
        let geom = self.grouped_geometry(input)?;
        let batch = geom.groups;
        if embedding.shape().first() != Some(&batch) {
            return Err(Error::shape(
                op,
                "embedding axis 0 vs input axis 0",
                format!("{:?} vs batch {batch}", embedding.shape()),
            ));
        }
        let (coeffs, adj_cache) = self.adjuster.forward(embedding)?;
        let embedded = embed_templates(&self.templates);
        let n = embedded.len();
        let per_kernel = self.static_kernel.len();
        let mut kernels = Vec::with_capacity(batch * per_kernel);
        for b in 0..batch {
            let mut k = assemble_from_embedded(&coeffs.data()[b * n..(b + 1) * n], &embedded)?;
            for (v, &s) in k.data_mut().iter_mut().zip(self.static_kernel.value.data()) {
                *v = s + *v;
            }
            kernels.extend_from_slice(k.data());
        }
        let [co, ci, kh, kw] = self.templates.full_dims();
        let kernels = Tensor::from_vec(&[batch * co, ci, kh, kw], kernels)?;
        let out = conv_forward_geom(&geom, input, &kernels).reshape(&[batch, co, geom.oh, geom.ow])?;
        out.ensure_finite(|| op.to_string())?;
        Ok((
            out,
            DynamicConvCache {
                input: input.clone(),
                kernels,
                embedded,
                adjuster: adj_cache,
                geom,
            },
        ))
    }

    pub fn backward(&self, grad_out: &Tensor<T>, cache: &DynamicConvCache<T>) -> Result<DynamicConvGrads<T>> {
        let op = "dynamic_conv_backward";
        let g = &cache.geom;
        let batch = g.groups;
        let per_out = g.out_c / batch;
        if cache.kernels.len() != batch * self.static_kernel.len() || cache.embedded.len() != self.templates.len() {
            return Err(Error::Usage(format!(
                "{op}: saved state does not belong to this layer"
            )));
        }
        if grad_out.shape() != [batch, per_out, g.oh, g.ow] {
            return Err(Error::shape(
                op,
                "grad_out (all axes)",
                format!("expected {:?}, got {:?}", [batch, per_out, g.oh, g.ow], grad_out.shape()),
            ));
        }
        let (grad_input, grad_kernels) = conv_backward_geom(g, grad_out, &cache.input, &cache.kernels);

        let n = self.templates.len();
        let per_kernel = self.static_kernel.len();
        let coeffs = cache.coefficients();
        let mut g_static = Tensor::zeros(self.static_kernel.value.shape());
        let mut g_coeffs = Tensor::zeros(&[batch, n]);
        let mut g_full = vec![Tensor::zeros(self.static_kernel.value.shape()); n];
        for b in 0..batch {
            let gk = Tensor::from_vec(
                self.static_kernel.value.shape(),
                grad_kernels.data()[b * per_kernel..(b + 1) * per_kernel].to_vec(),
            )?;
            g_static.add_assign(&gk)?;
            for j in 0..n {
                g_coeffs[b * n + j] = gk.dot(&cache.embedded[j])?;
                g_full[j].axpy(coeffs[b * n + j], &gk)?;
            }
        }
        let templates = g_full
            .iter()
            .enumerate()
            .map(|(j, gf)| self.templates.embed_adjoint(j, gf))
            .collect();
        let adj = self.adjuster.backward(&g_coeffs, &cache.adjuster)?;
        Ok(DynamicConvGrads {
            input: grad_input.reshape(cache.input.shape())?,
            embedding: adj.feature_in,
            static_kernel: g_static,
            templates,
            adjuster_w1: adj.w1,
            adjuster_b1: adj.b1,
            adjuster_w2: adj.w2,
            adjuster_b2: adj.b2,
            coefficients: g_coeffs,
        })
    }

    /// Add `grads` into this layer's parameter gradient buffers.
    pub fn accumulate(&mut self, grads: &DynamicConvGrads<T>) -> Result<()> {
        self.static_kernel.accumulate(&grads.static_kernel)?;
        for (p, g) in self.templates.templates.iter_mut().zip(&grads.templates) {
            p.accumulate(g)?;
        }
        self.adjuster.w1.accumulate(&grads.adjuster_w1)?;
        self.adjuster.b1.accumulate(&grads.adjuster_b1)?;
        self.adjuster.w2.accumulate(&grads.adjuster_w2)?;
        self.adjuster.b2.accumulate(&grads.adjuster_b2)
    }
}

/// Dynamic convolution whose adjuster reads the conv input itself.
pub fn dynamic_conv_forward<T: Scalar>(input: &Tensor<T>, layer: &DynamicConvLayer<T>) -> Result<Tensor<T>> {
    layer.forward(input, input).map(|(y, _)| y)
}

/// Backward of [`dynamic_conv_forward`]; `grads.input` already includes the
/// path through the adjuster.
pub fn dynamic_conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    layer: &DynamicConvLayer<T>,
    cache: Option<&DynamicConvCache<T>>,
) -> Result<DynamicConvGrads<T>> {
    let cache = cache.ok_or_else(|| {
        Error::Usage("dynamic_conv_backward: no saved forward state; run the forward pass first".into())
    })?;
    let mut grads = layer.backward(grad_out, cache)?;
    if grads.embedding.shape() == grads.input.shape() {
        grads.input.add_assign(&grads.embedding)?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamic::TemplateShape;
    use crate::ops::conv2d_forward;
    use crate::rng::Rng;

    fn layer(in_c: usize, out_c: usize, seed: u64, zero_templates: bool) -> DynamicConvLayer<f64> {
        let mut rng = Rng::new(seed);
        let kernel = rng.uniform_tensor(&[out_c, in_c, 3, 3], -1.0, 1.0);
        let templates = if zero_templates {
            KernelTemplateSet::asymmetric(in_c, out_c, 3).unwrap()
        } else {
            let ts = TemplateShape::ASYMMETRIC
                .iter()
                .map(|s| rng.uniform_tensor(&s.dims(in_c, out_c, 3), -1.0, 1.0))
                .collect();
            KernelTemplateSet::from_tensors(&TemplateShape::ASYMMETRIC, in_c, out_c, 3, ts).unwrap()
        };
        let adjuster = MetaAdjuster::new(in_c, 2, 4, &mut rng);
        DynamicConvLayer::new(kernel, templates, adjuster, 1, 1).unwrap()
    }

    #[test]
    fn zero_templates_reduce_to_static_conv() {
        let l = layer(3, 4, 1, true);
        let x: Tensor<f64> = Rng::new(2).uniform_tensor(&[3, 3, 6, 6], -1.0, 1.0);
        let dynamic = dynamic_conv_forward(&x, &l).unwrap();
        let stat = conv2d_forward(&x, &l.static_kernel.value, 1, 1).unwrap();
        assert!(dynamic.bitwise_eq(&stat));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let l = layer(2, 2, 3, false);
        let x: Tensor<f64> = Rng::new(4).uniform_tensor(&[2, 2, 4, 4], -1.0, 1.0);
        let (y, cache) = l.forward(&x, &x).unwrap();
        let g = dynamic_conv_backward(&Tensor::zeros(y.shape()), &l, Some(&cache)).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.static_kernel.max_abs(), 0.0);
        assert!(g.templates.iter().all(|t| t.max_abs() == 0.0));
        assert_eq!(g.adjuster_w1.max_abs(), 0.0);
        assert_eq!(g.adjuster_b2.max_abs(), 0.0);
    }

    #[test]
    fn missing_state_is_usage_error() {
        let l = layer(2, 2, 3, false);
        let err = dynamic_conv_backward(&Tensor::zeros(&[1, 2, 4, 4]), &l, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn foreign_cache_rejected() {
        let a = layer(2, 2, 3, false);
        let b = layer(2, 3, 3, false);
        let x: Tensor<f64> = Rng::new(4).uniform_tensor(&[1, 2, 4, 4], -1.0, 1.0);
        let (y, cache) = a.forward(&x, &x).unwrap();
        assert!(b.backward(&y, &cache).is_err());
    }

    #[test]
    fn param_count_identity() {
        let (ci, co, k, r) = (8, 6, 3, 4);
        let mut rng = Rng::new(0);
        let l = DynamicConvLayer::<f32>::new(
            Tensor::zeros(&[co, ci, k, k]),
            KernelTemplateSet::asymmetric(ci, co, k).unwrap(),
            MetaAdjuster::new(ci, r, 4, &mut rng),
            1,
            1,
        )
        .unwrap();
        let h = ci / r;
        let want = co * ci * k * k + ci * k * k + co * ci + co * ci * k * 2 + (ci * h + h + h * 4 + 4);
        assert_eq!(l.param_count(), want);
    }
}
