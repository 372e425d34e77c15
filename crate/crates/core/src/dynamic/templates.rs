//! Kernel templates and their embedding into full `k x k` kernel shape.

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{Scalar, Tensor};

/// Geometry of one kernel template and how it is placed inside a full kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateShape {
    /// `[Cin,1,k,k]`, shared by every output channel.
    Depthwise,
    /// `[Cout,Cin,1,1]` at the spatial center.
    Point,
    /// `[Cout,Cin,k,1]` in the center column.
    Column,
    /// `[Cout,Cin,1,k]` in the center row.
    Row,
    /// `[Cout,Cin,k,k]`, no embedding.
    Full,
}

impl TemplateShape {
    /// The four skeleton templates, in order V1..V4.
    pub const ASYMMETRIC: [TemplateShape; 4] = [
        TemplateShape::Depthwise,
        TemplateShape::Point,
        TemplateShape::Column,
        TemplateShape::Row,
    ];

    pub fn dims(self, in_c: usize, out_c: usize, k: usize) -> [usize; 4] {
        match self {
            TemplateShape::Depthwise => [in_c, 1, k, k],
            TemplateShape::Point => [out_c, in_c, 1, 1],
            TemplateShape::Column => [out_c, in_c, k, 1],
            TemplateShape::Row => [out_c, in_c, 1, k],
            TemplateShape::Full => [out_c, in_c, k, k],
        }
    }

    pub fn param_count(self, in_c: usize, out_c: usize, k: usize) -> usize {
        self.dims(in_c, out_c, k).iter().product()
    }
}

/// The templates `V_1..V_N` of one dynamic layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTemplateSet<T> {
    in_c: usize,
    out_c: usize,
    k: usize,
    shapes: Vec<TemplateShape>,
    pub templates: Vec<Param<T>>,
}

impl<T: Scalar> KernelTemplateSet<T> {
    /// Zero-initialized templates of the given shapes.
    pub fn zeros(shapes: &[TemplateShape], in_c: usize, out_c: usize, k: usize) -> Result<Self> {
        let tensors = shapes.iter().map(|s| Tensor::zeros(&s.dims(in_c, out_c, k))).collect();
        Self::from_tensors(shapes, in_c, out_c, k, tensors)
    }

    /// The standard skeleton set: depthwise `k x k`, `1x1`, `k x 1`, `1 x k`.
    pub fn asymmetric(in_c: usize, out_c: usize, k: usize) -> Result<Self> {
        Self::zeros(&TemplateShape::ASYMMETRIC, in_c, out_c, k)
    }

    pub fn from_tensors(
        shapes: &[TemplateShape],
        in_c: usize,
        out_c: usize,
        k: usize,
        tensors: Vec<Tensor<T>>,
    ) -> Result<Self> {
        let op = "KernelTemplateSet";
        if k.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "{op}: kernel size {k} is even; skeleton embedding needs a unique center"
            )));
        }
        if shapes.is_empty() || shapes.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "{op}: {} shapes but {} tensors",
                shapes.len(),
                tensors.len()
            )));
        }
        for (n, (s, t)) in shapes.iter().zip(&tensors).enumerate() {
            let want = s.dims(in_c, out_c, k);
            if t.shape() != want {
                return Err(Error::shape(
                    op,
                    format!("template {} (all axes)", n + 1),
                    format!("{s:?} needs {want:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(KernelTemplateSet {
            in_c,
            out_c,
            k,
            shapes: shapes.to_vec(),
            templates: tensors.into_iter().map(Param::new).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shapes(&self) -> &[TemplateShape] {
        &self.shapes
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    pub fn full_dims(&self) -> [usize; 4] {
        [self.out_c, self.in_c, self.k, self.k]
    }

    pub fn param_count(&self) -> usize {
        self.templates.iter().map(Param::len).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.templates.iter().all(|p| p.value.data().iter().all(|v| *v == T::zero()))
    }

    /// Template `n` placed into `[Cout,Cin,k,k]`.
    pub fn embed(&self, n: usize) -> Tensor<T> {
        let (ci, co, k) = (self.in_c, self.out_c, self.k);
        let c = (k - 1) / 2;
        let v = self.templates[n].value.data();
        let mut out = Tensor::zeros(&self.full_dims());
        let o = out.data_mut();
        let at = |oc: usize, ic: usize, y: usize, x: usize| ((oc * ci + ic) * k + y) * k + x;
        for oc in 0..co {
            for ic in 0..ci {
                match self.shapes[n] {
                    TemplateShape::Depthwise => {
                        let src = &v[ic * k * k..(ic + 1) * k * k];
                        o[at(oc, ic, 0, 0)..at(oc, ic, 0, 0) + k * k].copy_from_slice(src);
                    }
                    TemplateShape::Point => o[at(oc, ic, c, c)] = v[oc * ci + ic],
                    TemplateShape::Column => {
                        for y in 0..k {
                            o[at(oc, ic, y, c)] = v[(oc * ci + ic) * k + y];
                        }
                    }
                    TemplateShape::Row => {
                        for x in 0..k {
                            o[at(oc, ic, c, x)] = v[(oc * ci + ic) * k + x];
                        }
                    }
                    TemplateShape::Full => {
                        let base = at(oc, ic, 0, 0);
                        o[base..base + k * k].copy_from_slice(&v[base..base + k * k]);
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::embed`]: maps a gradient w.r.t. the full kernel to
    /// a gradient w.r.t. template `n`.
    pub fn embed_adjoint(&self, n: usize, full_grad: &Tensor<T>) -> Tensor<T> {
        let (ci, co, k) = (self.in_c, self.out_c, self.k);
        let c = (k - 1) / 2;
        let shape = self.shapes[n];
        let g = full_grad.data();
        let mut out = Tensor::zeros(&shape.dims(ci, co, k));
        let o = out.data_mut();
        let at = |oc: usize, ic: usize, y: usize, x: usize| ((oc * ci + ic) * k + y) * k + x;
        for oc in 0..co {
            for ic in 0..ci {
                match shape {
                    TemplateShape::Depthwise => {
                        for i in 0..k * k {
                            o[ic * k * k + i] += g[at(oc, ic, 0, 0) + i];
                        }
                    }
                    TemplateShape::Point => o[oc * ci + ic] = g[at(oc, ic, c, c)],
                    TemplateShape::Column => {
                        for y in 0..k {
                            o[(oc * ci + ic) * k + y] = g[at(oc, ic, y, c)];
                        }
                    }
                    TemplateShape::Row => {
                        for x in 0..k {
                            o[(oc * ci + ic) * k + x] = g[at(oc, ic, c, x)];
                        }
                    }
                    TemplateShape::Full => {
                        let base = at(oc, ic, 0, 0);
                        o[base..base + k * k].copy_from_slice(&g[base..base + k * k]);
                    }
                }
            }
        }
        out
    }
}

/// Every template mapped into full kernel shape `[Cout,Cin,k,k]`.
pub fn embed_templates<T: Scalar>(templates: &KernelTemplateSet<T>) -> Vec<Tensor<T>> {
    (0..templates.len()).map(|n| templates.embed(n)).collect()
}

/// `sum_n coeffs[n] * embed(V_n)`.
pub fn assemble_dynamic_kernel<T: Scalar>(coeffs: &[T], templates: &KernelTemplateSet<T>) -> Result<Tensor<T>> {
    assemble_from_embedded(coeffs, &embed_templates(templates))
}

pub(crate) fn assemble_from_embedded<T: Scalar>(coeffs: &[T], embedded: &[Tensor<T>]) -> Result<Tensor<T>> {
    if coeffs.len() != embedded.len() {
        return Err(Error::shape(
            "assemble_dynamic_kernel",
            "coefficient count vs template count",
            format!("{} vs {}", coeffs.len(), embedded.len()),
        ));
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            context: "assemble_dynamic_kernel coefficients".into(),
        });
    }
    let mut out = Tensor::zeros(embedded[0].shape());
    for (&c, e) in coeffs.iter().zip(embedded) {
        out.axpy(c, e)?;
    }
    Ok(out)
}
