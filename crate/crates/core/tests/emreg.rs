mod common;

use common::*;
use mfcontrol::emreg::{cell_means, regress_adjoint, run_emreg, CellRegression};
use mfcontrol::nag::{run, SolverConfig};
use mfcontrol::particles::simulate;
use mfcontrol::problems::portfolio::{Portfolio, PortfolioParams};
use proptest::prelude::*;

/// Dense normal equations `(A^T A) c = A^T y` for the indicator design,
/// restricted to the nonempty cells, solved by Gaussian elimination.
fn normal_equations(cells: &[usize], y: &[f64], ncells: usize) -> Vec<Option<f64>> {
    let used: Vec<usize> = (0..ncells).filter(|c| cells.contains(c)).collect();
    let n = used.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (s, &c) in cells.iter().enumerate() {
        let col = used.iter().position(|&u| u == c).unwrap();
        // row s of the design has a single one in column `col`
        for (r, row) in a.iter_mut().enumerate() {
            if r == col {
                row[col] += 1.0;
                row[n] += y[s];
            }
        }
    }
    for i in 0..n {
        let piv = a[i][i];
        for v in a[i].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != i {
                let f = a[r][i];
                for c in 0..=n {
                    a[r][c] -= f * a[i][c];
                }
            }
        }
    }
    (0..ncells).map(|c| used.iter().position(|&u| u == c).map(|i| a[i][n])).collect()
}

proptest! {
    #[test]
    fn cell_means_solve_the_normal_equations(
        ncells in 1usize..=10,
        samples in prop::collection::vec((0usize..10, -5.0..5.0f64), 1..=100),
    ) {
        let cells: Vec<usize> = samples.iter().map(|(c, _)| c % ncells).collect();
        let y: Vec<f64> = samples.iter().map(|(_, v)| *v).collect();
        let (means, counts) = cell_means(&cells, &y, 1, ncells);
        let oracle = normal_equations(&cells, &y, ncells);
        for c in 0..ncells {
            match oracle[c] {
                Some(v) => prop_assert!((means[c] - v).abs() <= 1e-10),
                None => prop_assert_eq!(counts[c], 0),
            }
        }
    }
}

#[test]
fn constant_targets_fill_visited_cells() {
    let p = Toy { g1: 1.75, drift: Drift::Const(0.2), sigma: 0.5, ..Default::default() };
    let psi = toy_policy(&p, 13, 10, 0.0);
    let ens = simulate(&p, &psi, 400, 10, 2).unwrap();
    let mut reg = CellRegression::new(psi.grid().clone(), 1);
    regress_adjoint(&p, &psi, &ens, &mut reg).unwrap();
    let mut visited = 0;
    for j in 0..=10 {
        for c in 0..reg.cell_count() {
            if reg.visited(j, c) {
                visited += 1;
                assert_eq!(reg.value(j, c), &[1.75]);
            } else {
                assert_eq!(reg.value(j, c), &[0.0]);
            }
        }
    }
    assert!(visited > 11);
}

#[test]
fn unvisited_inventory_region_keeps_the_initial_guess() {
    let p = Portfolio::new(PortfolioParams::default()).unwrap();
    let g = problem_grid(&p, 26, 25);
    let cfg = SolverConfig::new(g.clone(), 2000, 1.0 / 6.0, 3, 5);
    let emreg = run_emreg(&p, &cfg).unwrap();
    let fipde = run(&p, &cfg).unwrap();
    let high: Vec<usize> = (0..g.node_count()).filter(|&k| g.node_point(k)[1] > 2.5).collect();
    for j in 0..=g.time_steps() {
        for &k in &high {
            assert_eq!(emreg.phi.field().at(j, k)[0], 0.0);
        }
    }
    assert!(high.iter().any(|&k| fipde.phi.field().at(0, k)[0] != 0.0));
}

#[test]
fn frozen_nodes_are_exactly_those_without_visited_cells() {
    let p = Portfolio::new(PortfolioParams::default()).unwrap();
    let g = problem_grid(&p, 21, 20);
    let psi = mfcontrol::grid::PolicyField::zeros(g.clone(), 1);
    let ens = simulate(&p, &psi, 500, g.time_steps(), 9).unwrap();
    let mut reg = CellRegression::new(g.clone(), 2);
    let adj = regress_adjoint(&p, &psi, &ens, &mut reg).unwrap();
    let (field, frozen) = reg.node_field();
    let nx = g.nodes()[1] - 1;
    let nodes = g.node_count();
    let mut some_frozen = false;
    for j in 0..=g.time_steps() {
        for k in 0..nodes {
            let mut idx = [0usize; 2];
            g.multi_index(k, &mut idx);
            let mut touching = false;
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (ci, cj) = (idx[0] + a, idx[1] + b);
                if ci >= 1 && cj >= 1 && ci <= g.nodes()[0] - 1 && cj <= nx {
                    touching |= reg.visited(j, (ci - 1) * nx + (cj - 1));
                }
            }
            assert_eq!(frozen[j * nodes + k], !touching);
            if !touching {
                some_frozen = true;
                assert_eq!(field.at(j, k), &[0.0, 0.0]);
            }
            assert_eq!(adj.u.at(j, k), field.at(j, k));
        }
    }
    assert!(some_frozen);
}
