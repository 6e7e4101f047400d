use nct_core::model::nfa::{
    aggregate, gather_neighborhood, neighborhood_index, nfa_forward, position_embed, project_grid,
};
use nct_core::model::{Model, ModelConfig, ModelSpec, Padding};
use nct_core::scene::FeatureGrid;
use nct_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(h: usize, w: usize, c: usize, d: usize, padding: Padding) -> ModelSpec {
    let config = ModelConfig {
        d_model: d,
        heads: 2,
        padding,
        ..Default::default()
    };
    ModelSpec::new(config, c, h, w, 10, 4).unwrap()
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn zero(model: &mut Model, name: &str) {
    let n = model.params.get(name).unwrap().numel();
    model.params.set(name, &vec![0.0; n]).unwrap();
}

#[test]
fn position_embedding_halves() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, half) = (4, 5, 3);
    let rows = Tensor::new(vec![h, half], random(&mut rng, h * half)).unwrap();
    let cols = Tensor::new(vec![w, half], random(&mut rng, w * half)).unwrap();
    let a = position_embed(0, 0, &rows, &cols).unwrap();
    let b = position_embed(0, 1, &rows, &cols).unwrap();
    assert_eq!(a[..half], b[..half]);
    assert!(a[half..].iter().zip(&b[half..]).all(|(x, y)| x != y));

    let mut all = Vec::new();
    for r in 0..h {
        for c in 0..w {
            all.push(position_embed(r, c, &rows, &cols).unwrap());
        }
    }
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            assert_ne!(all[i], all[j]);
        }
    }
    assert!(position_embed(h, 0, &rows, &cols).is_err());

    let z = Tensor::zeros(vec![h, half]).unwrap();
    let zc = Tensor::zeros(vec![w, half]).unwrap();
    assert!(position_embed(1, 2, &z, &zc).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn projection_zero_and_identity() {
    let s = spec(3, 3, 4, 4, Padding::Zero);
    let mut model = Model::new(s.clone()).unwrap();
    for n in ["nfa.b_v", "nfa.pos_row", "nfa.pos_col"] {
        zero(&mut model, n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 9 * 4);

    model
        .params
        .set(
            "nfa.m_v",
            &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.],
        )
        .unwrap();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let xv = g.constant(vec![9, 4], x.clone()).unwrap();
    let y = project_grid(&mut g, &p, &s, xv).unwrap();
    assert_eq!(g.value(y), x.as_slice());

    zero(&mut model, "nfa.m_v");
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let xv = g.constant(vec![9, 4], x).unwrap();
    let y = project_grid(&mut g, &p, &s, xv).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let bad = g.constant(vec![9, 3], vec![0.0; 27]).unwrap();
    assert!(project_grid(&mut g, &p, &s, bad).is_err());
}

#[test]
fn neighbourhood_geometry() {
    let idx = neighborhood_index(3, 3, 1, Padding::Zero).unwrap();
    assert_eq!(idx, (0..9).map(Some).collect::<Vec<_>>());

    let idx = neighborhood_index(4, 4, 3, Padding::Zero).unwrap();
    assert_eq!(idx[..9].iter().filter(|i| i.is_none()).count(), 5);
    // the centre slot of every block is the cell itself
    for cell in 0..16 {
        assert_eq!(idx[cell * 9 + 4], Some(cell));
    }
    assert!(neighborhood_index(4, 4, 2, Padding::Zero).is_err());
    assert!(neighborhood_index(4, 4, 5, Padding::Zero).is_err());
}

#[test]
fn cyclic_gather_commutes_with_shift() {
    let s = spec(5, 5, 4, 4, Padding::Cyclic);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = FeatureGrid::new(4, 5, 5, random(&mut rng, 100)).unwrap();
    let shifted = grid.roll(2, -1);
    let mut g = Graph::new();
    let a = g.constant(vec![25, 4], grid.data().to_vec()).unwrap();
    let b = g.constant(vec![25, 4], shifted.data().to_vec()).unwrap();
    let ga = gather_neighborhood(&mut g, a, &s).unwrap();
    let gb = gather_neighborhood(&mut g, b, &s).unwrap();
    let (va, vb) = (g.value(ga).to_vec(), g.value(gb));
    let block = 9 * 4;
    for r in 0..5usize {
        for c in 0..5usize {
            let dst = ((r + 2) % 5) * 5 + (c + 4) % 5;
            assert_eq!(
                &vb[dst * block..(dst + 1) * block],
                &va[(r * 5 + c) * block..(r * 5 + c + 1) * block]
            );
        }
    }
}

#[test]
fn zero_output_map_is_identity() {
    let s = spec(4, 4, 6, 8, Padding::Zero);
    let mut model = Model::new(s.clone()).unwrap();
    zero(&mut model, "nfa.0.t.w");
    zero(&mut model, "nfa.0.t.b");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(vec![16, 8], random(&mut rng, 128)).unwrap();
    let out = aggregate(&mut g, &p, &s, 0, x).unwrap();
    assert_eq!(g.value(out.output), g.value(x));
}

#[test]
fn neighbourhood_weights_are_distributions() {
    let s = spec(5, 5, 6, 8, Padding::Zero);
    let model = Model::new(s.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(vec![25, 8], random(&mut rng, 200)).unwrap();
    let out = aggregate(&mut g, &p, &s, 0, x).unwrap();
    assert_eq!(g.shape(out.output), [25, 8]);
    for row in g.value(out.attention).chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&a| a > 0.0 && a < 1.0));
    }
}

#[test]
fn cyclic_aggregation_is_shift_equivariant() {
    let s = spec(5, 5, 6, 8, Padding::Cyclic);
    let mut model = Model::new(s.clone()).unwrap();
    zero(&mut model, "nfa.pos_row");
    zero(&mut model, "nfa.pos_col");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = FeatureGrid::new(6, 5, 5, random(&mut rng, 150)).unwrap();
    let run = |grid: &FeatureGrid| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.constant(vec![25, 6], grid.data().to_vec()).unwrap();
        let (_, y) = nfa_forward(&mut g, &p, &s, x).unwrap();
        FeatureGrid::new(8, 5, 5, g.value(y).to_vec()).unwrap()
    };
    let base = run(&grid);
    let mut worst: f64 = 0.0;
    for dr in 0..5 {
        for dc in 0..5 {
            let lhs = run(&grid.roll(dr, dc));
            let rhs = base.roll(dr, dc);
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-10, "max deviation {worst:e}");
}
