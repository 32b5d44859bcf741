//! Independent reference solvers used to check the production solvers.
//!
//! Both work on a discrete grid and share no code with the library.

#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

/// Quadratic unit `a p² + b p + c` with bounds, in MW.
#[derive(Debug, Clone, Copy)]
pub struct Unit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl Unit {
    pub fn cost(&self, p: f64) -> f64 {
        self.a * p * p + self.b * p + self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridDispatch {
    pub power: Vec<f64>,
    pub cost: f64,
}

/// Exact minimum over outputs that are whole multiples of `step` MW with
/// total at least `demand`.
///
/// Units start at their minimum and receive one grid increment at a time,
/// always to the unit whose next increment is cheapest. For separable convex
/// costs this incremental allocation is optimal on the grid.
pub fn dispatch_grid(units: &[Unit], demand: f64, step: f64) -> Option<GridDispatch> {
    let ticks = |x: f64| (x / step).round() as i64;
    let lo: Vec<i64> = units.iter().map(|u| ticks(u.p_min)).collect();
    let hi: Vec<i64> = units.iter().map(|u| ticks(u.p_max)).collect();
    let need = (demand / step - 1e-9).ceil() as i64;
    if hi.iter().sum::<i64>() < need {
        return None;
    }
    let mut at = lo.clone();
    let inc = |i: usize, k: i64| {
        let p = k as f64 * step;
        units[i].cost(p + step) - units[i].cost(p)
    };
    // Increments are ordered by an integer key so the heap is total.
    let key = |x: f64| (x * 1e9).round() as i64;
    let mut heap: BinaryHeap<Reverse<(i64, usize)>> = (0..units.len())
        .filter(|&i| at[i] < hi[i])
        .map(|i| Reverse((key(inc(i, at[i])), i)))
        .collect();
    let mut total: i64 = at.iter().sum();
    while let Some(Reverse((k, i))) = heap.pop() {
        if total >= need && k >= 0 {
            break;
        }
        at[i] += 1;
        total += 1;
        if at[i] < hi[i] {
            heap.push(Reverse((key(inc(i, at[i])), i)));
        }
    }
    if total < need {
        return None;
    }
    let power: Vec<f64> = at.iter().map(|&k| k as f64 * step).collect();
    let cost = units.iter().zip(&power).map(|(u, &p)| u.cost(p)).sum();
    Some(GridDispatch { power, cost })
}

/// Charging session for the EV oracle; `depart` is exclusive.
#[derive(Debug, Clone, Copy)]
pub struct Vehicle {
    pub initial: f64,
    pub target: f64,
    pub u_max: f64,
    pub depart: usize,
}

/// Smallest sum of squared terminal deficits over every schedule whose
/// per-step powers are multiples of `step` kW, found by enumerating the
/// reachable energy totals step by step.
pub fn ev_grid(vehicles: &[Vehicle], steps: usize, capacity: f64, step: f64) -> f64 {
    let n = vehicles.len();
    let units = |x: f64| (x / step + 1e-9).floor() as i64;
    let cap = units(capacity);
    let room: Vec<i64> = vehicles.iter().map(|v| units(v.target - v.initial).max(0)).collect();
    let mut reachable: HashSet<Vec<i64>> = HashSet::from([vec![0; n]]);
    for t in 0..steps {
        let limits: Vec<i64> = vehicles
            .iter()
            .map(|v| if t < v.depart { units(v.u_max) } else { 0 })
            .collect();
        let moves = all_moves(&limits, cap);
        let mut next = HashSet::new();
        for s in &reachable {
            for m in &moves {
                let candidate: Vec<i64> = s.iter().zip(m).map(|(a, b)| a + b).collect();
                if candidate.iter().zip(&room).all(|(c, r)| c <= r) {
                    next.insert(candidate);
                }
            }
        }
        reachable = next;
    }
    reachable
        .iter()
        .map(|s| {
            vehicles
                .iter()
                .zip(s)
                .map(|(v, &k)| {
                    let deficit = v.target - v.initial - k as f64 * step;
                    deficit * deficit
                })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

fn all_moves(limits: &[i64], cap: i64) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for &lim in limits {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                let used: i64 = prefix.iter().sum();
                (0..=lim.min(cap - used)).map(move |k| {
                    let mut v = prefix.clone();
                    v.push(k);
                    v
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod self_checks {
    use super::*;

    #[test]
    fn dispatch_grid_two_equal_units_split_evenly() {
        let u = Unit { a: 1.0, b: 0.0, c: 0.0, p_min: 0.0, p_max: 10.0 };
        let g = dispatch_grid(&[u, u], 4.0, 0.01).unwrap();
        assert_eq!(g.power, vec![2.0, 2.0]);
        assert!((g.cost - 8.0).abs() < 1e-9);
    }

    #[test]
    fn ev_grid_capacity_limits_delivery() {
        let v = Vehicle { initial: 0.0, target: 3.0, u_max: 2.0, depart: 2 };
        assert!((ev_grid(&[v], 3, 1.0, 0.1) - 1.0).abs() < 1e-9);
        assert!(ev_grid(&[v], 3, 5.0, 0.1).abs() < 1e-9);
    }
}
