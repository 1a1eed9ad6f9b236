//! Symmetry properties: attention has no positional encoding, so permuting
//! the attended axis must permute the output; graph convolution must commute
//! with a consistent relabeling of the joints.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sttr::graph::{AdjacencySet, PartitionStrategy, SkeletonTopology};
use sttr::layers::{GcnCore, LayerCtx, SelfAttentionConfig, SsaLayer, TsaLayer, ValueDim};
use sttr::tensor::tape::GradTape;
use sttr::tensor::Tensor;

const TOL: f64 = 1e-9;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// out[.., j, ..] = x[.., perm[j], ..] along `axis`.
fn permute_axis(x: &Tensor<f64>, axis: usize, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |ix| {
        let mut src = ix.to_vec();
        src[axis] = perm[ix[axis]];
        x.at(&src)
    })
}

fn random_perm(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(rng);
    p
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn attn_cfg(c_in: usize, c_out: usize, heads: usize) -> SelfAttentionConfig {
    SelfAttentionConfig::new(c_in, c_out, heads, ValueDim::FullOutput, 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spatial_attention_commutes_with_joint_permutation(
        seed in 0u64..1_000_000,
        t in 1usize..5,
        v in 2usize..9,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = SsaLayer::<f64>::new("s", attn_cfg(4, 8, 2), &mut rng);
        let x = rand_tensor(&[2, 4, t, v], &mut rng);
        let perm = random_perm(v, &mut rng);

        let run = |layer: &mut SsaLayer<f64>, x: &Tensor<f64>| {
            let mut tape = GradTape::new();
            let xv = tape.input(x);
            let y = layer.forward(&mut tape, xv, &mut LayerCtx::eval()).unwrap();
            tape.value(y).clone()
        };
        let y = run(&mut layer, &x);
        let y_of_permuted = run(&mut layer, &permute_axis(&x, 3, &perm));
        let permuted_y = permute_axis(&y, 3, &perm);
        let d = max_abs_diff(&y_of_permuted, &permuted_y);
        prop_assert!(d <= TOL, "joint permutation broke equivariance by {d:e}");
    }

    #[test]
    fn temporal_attention_commutes_with_frame_permutation(
        seed in 0u64..1_000_000,
        t in 2usize..9,
        v in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = TsaLayer::<f64>::new("t", attn_cfg(4, 8, 2), 1, None, &mut rng).unwrap();
        let x = rand_tensor(&[2, 4, t, v], &mut rng);
        let perm = random_perm(t, &mut rng);

        let run = |layer: &mut TsaLayer<f64>, x: &Tensor<f64>| {
            let mut tape = GradTape::new();
            let xv = tape.input(x);
            let y = layer.forward(&mut tape, xv, &mut LayerCtx::eval()).unwrap();
            tape.value(y).clone()
        };
        let y = run(&mut layer, &x);
        let y_of_permuted = run(&mut layer, &permute_axis(&x, 2, &perm));
        let permuted_y = permute_axis(&y, 2, &perm);
        let d = max_abs_diff(&y_of_permuted, &permuted_y);
        prop_assert!(d <= TOL, "frame permutation broke equivariance by {d:e}");
    }
}

/// Relabeling the skeleton (edges, center, and the input's joint axis the
/// same way) must relabel the graph convolution's output and nothing else.
#[test]
fn graph_convolution_commutes_with_joint_relabeling() {
    let edges = vec![(0usize, 1usize), (1, 2), (2, 3), (1, 4), (4, 5), (5, 6)];
    let (v, center) = (7usize, 1usize);
    for (case, strategy) in [
        PartitionStrategy::Uniform,
        PartitionStrategy::Distance,
        PartitionStrategy::Spatial,
        PartitionStrategy::Spatial,
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + case as u64);
        let sigma = random_perm(v, &mut rng);
        let mut inv = vec![0usize; v];
        for (old, &new) in sigma.iter().enumerate() {
            inv[new] = old;
        }

        let topo = SkeletonTopology::new(v, edges.clone(), center).unwrap();
        let relabeled_edges: Vec<(usize, usize)> =
            edges.iter().map(|&(a, b)| (sigma[a], sigma[b])).collect();
        let relabeled = SkeletonTopology::new(v, relabeled_edges, sigma[center]).unwrap();

        // Same init seed on both sides: identical weights, different graphs.
        let adj = AdjacencySet::build(&topo, strategy).unwrap();
        let adj2 = AdjacencySet::build(&relabeled, strategy).unwrap();
        assert_eq!(adj.cast::<f64>().len(), adj2.cast::<f64>().len());
        let core = GcnCore::<f64>::new("g", &adj, 3, 5, &mut ChaCha8Rng::seed_from_u64(7));
        let core2 = GcnCore::<f64>::new("g", &adj2, 3, 5, &mut ChaCha8Rng::seed_from_u64(7));

        let run = |core: &GcnCore<f64>, x: &Tensor<f64>| {
            let mut tape = GradTape::new();
            let xv = tape.input(x);
            let y = core.forward(&mut tape, xv).unwrap();
            tape.value(y).clone()
        };
        let x = rand_tensor(&[2, 3, 4, v], &mut rng);
        // x under new labels: new joint sigma[u] holds old joint u's data.
        let x_new = permute_axis(&x, 3, &inv);
        let y_new = run(&core2, &x_new);
        let want = permute_axis(&run(&core, &x), 3, &inv);
        let d = max_abs_diff(&y_new, &want);
        assert!(d <= TOL, "{strategy:?}: relabeling broke equivariance by {d:e}");
    }
}
