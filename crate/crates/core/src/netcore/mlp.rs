use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ExplicitTerm;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{gemm_into, DenseMatrix, MatRef};

pub const MODEL_MAGIC: &[u8; 8] = b"IMEXNN01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Linear),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }
}

/// Dense feed-forward network acting column-wise on `d x batch` blocks.
///
/// Parameters live in one flat vector, layer by layer: the weight matrix
/// (`out x in`, row-major) followed by the bias vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

fn layer_offsets(dims: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(dims.len());
    let mut acc = 0;
    offsets.push(0);
    for w in dims.windows(2) {
        acc += w[0] * w[1] + w[1];
        offsets.push(acc);
    }
    offsets
}

impl MlpModel {
    /// Zero-initialized network.
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least two positive layer sizes, got {dims:?}"
            )));
        }
        check_dim("MlpModel activations", dims.len() - 1, activations.len())?;
        let offsets = layer_offsets(&dims);
        let params = vec![0.0; *offsets.last().unwrap()];
        Ok(Self {
            dims,
            activations,
            params,
            offsets,
        })
    }

    /// ReLU on every hidden layer, linear output layer.
    pub fn relu_net(dims: Vec<usize>) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let acts = (0..n)
            .map(|l| if l + 1 == n { Activation::Linear } else { Activation::Relu })
            .collect();
        Self::new(dims, acts)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim("MlpModel::set_params", self.params.len(), p.len())?;
        self.params.copy_from_slice(p);
        Ok(())
    }

    /// Range of layer `l`'s weights and biases inside the flat vector.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let w0 = self.offsets[l];
        (w0..w0 + i * o, w0 + i * o..w0 + i * o + o)
    }

    fn weights(&self, l: usize) -> MatRef<'_> {
        let (w, _) = self.layer_ranges(l);
        MatRef::new(&self.params[w], self.dims[l + 1], self.dims[l])
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (_, b) = self.layer_ranges(l);
        &self.params[b]
    }

    /// Pre-activation of layer `l` for input block `a`.
    fn affine(&self, l: usize, a: &DenseMatrix) -> DenseMatrix {
        let m = a.cols();
        let mut z = DenseMatrix::zeros(self.dims[l + 1], m);
        gemm_into(1.0, self.weights(l), MatRef::from(a), 0.0, z.data_mut(), self.dims[l + 1], m);
        for (i, &bi) in self.bias(l).iter().enumerate() {
            z.row_mut(i).iter_mut().for_each(|v| *v += bi);
        }
        z
    }

    fn activate(act: Activation, z: &mut DenseMatrix) {
        if act == Activation::Relu {
            z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }

    pub fn forward(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        check_dim("mlp_forward", self.input_dim(), u.rows())?;
        let mut a = self.affine(0, u);
        Self::activate(self.activations[0], &mut a);
        for l in 1..self.n_layers() {
            let mut z = self.affine(l, &a);
            Self::activate(self.activations[l], &mut z);
            a = z;
        }
        Ok(a)
    }

    /// Vector-Jacobian products at `u` for cotangent `v`.
    ///
    /// Returns `(∂g/∂u)ᵀ v` column by column and `(∂g/∂p)ᵀ v` summed over the
    /// batch. Activations are recomputed from `u`. The ReLU derivative at zero is 0.
    pub fn vjp(&self, u: &DenseMatrix, v: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
        check_dim("mlp_vjp input", self.input_dim(), u.rows())?;
        check_dim("mlp_vjp cotangent rows", self.output_dim(), v.rows())?;
        check_dim("mlp_vjp cotangent cols", u.cols(), v.cols())?;
        let m = u.cols();
        let n = self.n_layers();
        // inputs[l] feeds layer l; preacts[l] is its pre-activation.
        let mut inputs: Vec<DenseMatrix> = Vec::with_capacity(n);
        let mut preacts: Vec<DenseMatrix> = Vec::with_capacity(n);
        let mut a = u.clone();
        for l in 0..n {
            let z = self.affine(l, &a);
            let mut next = z.clone();
            Self::activate(self.activations[l], &mut next);
            inputs.push(a);
            preacts.push(z);
            a = next;
        }

        let mut grad = vec![0.0; self.params.len()];
        let mut delta = v.clone();
        for l in (0..n).rev() {
            if self.activations[l] == Activation::Relu {
                for (d, z) in delta.data_mut().iter_mut().zip(preacts[l].data()) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (wr, br) = self.layer_ranges(l);
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            gemm_into(
                1.0,
                MatRef::from(&delta),
                MatRef::from(&inputs[l]).t(),
                0.0,
                &mut grad[wr],
                dout,
                din,
            );
            for (g, i) in grad[br].iter_mut().zip(0..dout) {
                *g = delta.row(i).iter().sum();
            }
            let mut prev = DenseMatrix::zeros(din, m);
            gemm_into(1.0, self.weights(l).t(), MatRef::from(&delta), 0.0, prev.data_mut(), din, m);
            delta = prev;
        }
        Ok((delta, grad))
    }

    /// Writes the binary model format: magic, layer count, sizes, activation tags,
    /// then the parameters as little-endian doubles.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(self.n_layers() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for a in &self.activations {
            w.write_all(&[a.tag()])?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not an IMEXNN01 model file".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4)?;
        let n_layers = u32::from_le_bytes(b4) as usize;
        if n_layers == 0 || n_layers > 4096 {
            return Err(Error::Format(format!("implausible layer count {n_layers}")));
        }
        let mut dims = Vec::with_capacity(n_layers + 1);
        let mut b8 = [0u8; 8];
        for _ in 0..=n_layers {
            read_exact(&mut r, &mut b8)?;
            dims.push(u64::from_le_bytes(b8) as usize);
        }
        let mut acts = Vec::with_capacity(n_layers);
        let mut b1 = [0u8; 1];
        for _ in 0..n_layers {
            read_exact(&mut r, &mut b1)?;
            acts.push(Activation::from_tag(b1[0])?);
        }
        let mut model = Self::new(dims, acts)?;
        for p in model.params.iter_mut() {
            read_exact(&mut r, &mut b8)?;
            *p = f64::from_le_bytes(b8);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("model file is truncated".into())
        } else {
            Error::Io(e)
        }
    })
}

/// ReLU network with i.i.d. `N(0, sigma^2)` weights and zero biases.
///
/// Draws come from ChaCha8 seeded with `seed`, in parameter order, so a given
/// seed produces the same network on every platform.
pub fn init_weights(dims: &[usize], sigma: f64, seed: u64) -> Result<MlpModel> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut model = MlpModel::relu_net(dims.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..model.n_layers() {
        let (w, _) = model.layer_ranges(l);
        for p in &mut model.params[w] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = sigma * z;
        }
    }
    Ok(model)
}

impl ExplicitTerm for MlpModel {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn eval(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward(u)
    }

    fn vjp(&self, u: &DenseMatrix, v: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
        MlpModel::vjp(self, u, v)
    }
}
