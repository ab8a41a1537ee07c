//! Two-layer MLP that predicts parameter matrices from a learned
//! latent vector: `flat = W2 * relu(W1 * z + b1) + b2`, split into
//! named row-major segments.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::rng;

/// How a segment's slice of `W2` rows and `b2` entries starts out.
#[derive(Clone, Debug)]
pub enum SegmentInit {
    /// Kaiming-uniform rows, zero bias.
    Random,
    /// Rows and bias exactly zero, so the generated matrix is the zero
    /// matrix at construction (the low-rank-update convention for B).
    Zero,
    /// Rows zero, bias set to the given values: the generated segment
    /// equals them exactly at construction but remains trainable (used
    /// for magnitude vectors that must start at the base column norms).
    Bias(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct OutputSegment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: SegmentInit,
}

impl OutputSegment {
    pub fn new(name: &str, rows: usize, cols: usize, init: SegmentInit) -> Self {
        OutputSegment {
            name: name.to_string(),
            rows,
            cols,
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct MlpGenerator {
    graph: Graph,
    pub z: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    segments: Vec<OutputSegment>,
    hidden: usize,
    latent: usize,
}

impl MlpGenerator {
    /// Draw order is fixed (z, then W1 row-major, then the Random rows
    /// of W2 in segment order) so a seed reproduces parameters bitwise.
    pub fn new(
        graph: &Graph,
        name: &str,
        hidden: usize,
        latent: usize,
        segments: Vec<OutputSegment>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(hidden > 0 && latent > 0, "generator dims must be positive");
        let out_total: usize = segments.iter().map(OutputSegment::len).sum();

        let z_vals = Matrix::from_fn(latent, 1, |_, _| {
            rng::normal(rng) / (latent as f64).sqrt()
        });
        let w1_vals = Matrix::from_fn(hidden, latent, |_, _| rng::kaiming_uniform(rng, latent));

        let mut w2_vals = Matrix::zeros(out_total, hidden);
        let mut b2_vals = Matrix::zeros(out_total, 1);
        let mut offset = 0;
        for seg in &segments {
            match &seg.init {
                SegmentInit::Random => {
                    for i in 0..seg.len() {
                        for j in 0..hidden {
                            w2_vals.set(offset + i, j, rng::kaiming_uniform(rng, hidden));
                        }
                    }
                }
                SegmentInit::Zero => {}
                SegmentInit::Bias(values) => {
                    assert_eq!(
                        values.len(),
                        seg.len(),
                        "bias init length mismatch for segment {}",
                        seg.name
                    );
                    for (i, &v) in values.iter().enumerate() {
                        b2_vals.set(offset + i, 0, v);
                    }
                }
            }
            offset += seg.len();
        }

        MlpGenerator {
            graph: graph.clone(),
            z: graph.leaf(&format!("{name}.z"), z_vals, true),
            w1: graph.leaf(&format!("{name}.w1"), w1_vals, true),
            b1: graph.leaf(&format!("{name}.b1"), Matrix::zeros(hidden, 1), true),
            w2: graph.leaf(&format!("{name}.w2"), w2_vals, true),
            b2: graph.leaf(&format!("{name}.b2"), b2_vals, true),
            segments,
            hidden,
            latent,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn segments(&self) -> &[OutputSegment] {
        &self.segments
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.z.clone(),
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    /// Runs the MLP and splits the flat output into the named matrices,
    /// differentiable through every parameter.
    pub fn generate(&self) -> Result<Vec<(String, Tensor)>> {
        let g = &self.graph;
        let pre = g.add(&g.matmul(&self.w1, &self.z)?, &self.b1)?;
        let h = g.relu(&pre);
        let flat = g.add(&g.matmul(&self.w2, &h)?, &self.b2)?;
        let mut out = Vec::with_capacity(self.segments.len());
        let mut offset = 0;
        for seg in &self.segments {
            let slice = g.slice_rows(&flat, offset, seg.len())?;
            let mat = g.reshape(&slice, seg.rows, seg.cols)?;
            out.push((seg.name.clone(), mat));
            offset += seg.len();
        }
        Ok(out)
    }

    /// Generates and returns the segment with the given name.
    pub fn generate_named(&self, name: &str) -> Result<Tensor> {
        self.generate()?
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| {
                crate::error::Error::contract(format!("no generator segment named '{name}'"))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_init_segment_is_exactly_zero() {
        let g = Graph::new();
        let mut r = rng::stream(&["gen-zero"]);
        let gen = MlpGenerator::new(
            &g,
            "g",
            32,
            128,
            vec![
                OutputSegment::new("a", 2, 3, SegmentInit::Random),
                OutputSegment::new("b", 3, 2, SegmentInit::Zero),
            ],
            &mut r,
        );
        let out = gen.generate().unwrap();
        assert_eq!(out[1].0, "b");
        assert!(out[1].1.values().is_zero());
        assert!(!out[0].1.values().is_zero());
    }

    #[test]
    fn bias_init_segment_equals_values_at_start() {
        let g = Graph::new();
        let mut r = rng::stream(&["gen-bias"]);
        let target = vec![1.5, -2.0, 0.25];
        let gen = MlpGenerator::new(
            &g,
            "g",
            8,
            16,
            vec![OutputSegment::new(
                "m",
                3,
                1,
                SegmentInit::Bias(target.clone()),
            )],
            &mut r,
        );
        let m = gen.generate_named("m").unwrap();
        assert_eq!(m.values().data(), target.as_slice());
    }

    #[test]
    fn hand_set_one_hidden_unit() {
        // z=[1], W1=[2], b1=[-1], W2=[[3],[-3]], b2=[0,1]:
        // h = relu(2*1 - 1) = 1; flat = [3*1+0, -3*1+1] = [3, -2].
        let g = Graph::new();
        let mut r = rng::stream(&["gen-hand"]);
        let gen = MlpGenerator::new(
            &g,
            "g",
            1,
            1,
            vec![OutputSegment::new("out", 2, 1, SegmentInit::Random)],
            &mut r,
        );
        gen.z.set_values(Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        gen.w1.set_values(Matrix::from_vec(1, 1, vec![2.0])).unwrap();
        gen.b1.set_values(Matrix::from_vec(1, 1, vec![-1.0])).unwrap();
        gen.w2
            .set_values(Matrix::from_vec(2, 1, vec![3.0, -3.0]))
            .unwrap();
        gen.b2.set_values(Matrix::from_vec(2, 1, vec![0.0, 1.0])).unwrap();
        let out = gen.generate_named("out").unwrap();
        assert_eq!(out.values().data(), &[3.0, -2.0]);
    }

    #[test]
    fn same_seed_bitwise_identical_params() {
        let build = || {
            let g = Graph::new();
            let mut r = rng::stream(&["gen-seeded", "3"]);
            let gen = MlpGenerator::new(
                &g,
                "g",
                4,
                6,
                vec![OutputSegment::new("a", 3, 3, SegmentInit::Random)],
                &mut r,
            );
            gen.params()
                .iter()
                .flat_map(|p| p.values().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn w1_entries_within_kaiming_bound() {
        let g = Graph::new();
        let mut r = rng::stream(&["gen-bound"]);
        let gen = MlpGenerator::new(
            &g,
            "g",
            16,
            64,
            vec![OutputSegment::new("a", 4, 4, SegmentInit::Random)],
            &mut r,
        );
        let b = rng::kaiming_bound(64);
        for &v in gen.w1.values().data() {
            assert!(v > -b && v < b);
        }
        // Biases start at zero.
        assert!(gen.b1.values().is_zero());
    }
}
