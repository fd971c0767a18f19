//! Slot-based stochastic simulation of the operational system.
//!
//! Requests and crowd drivers arrive as Poisson streams; every slot the
//! pooled requests are matched one by one, in random order, to the cheapest
//! available option. Serving FDs travel for `r_ij / v` hours and relocate on
//! arrival according to a fixed routing matrix.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::fluid::{FluidError, FluidSolution};
use crate::instance::Instance;

/// Probability that an FD finishing a delivery at `i` next heads to `j`; `q[i][i]` is staying.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix {
    pub q: Vec<Vec<f64>>,
}

impl RoutingMatrix {
    pub fn identity(m: usize) -> Self {
        Self { q: (0..m).map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect() }
    }
}

/// Routing matrix whose relocation flows reproduce the fluid solution:
/// `mu_ij e_ij = Q_ij sum_k mu_ki f_ki`.
pub fn derive_routing(inst: &Instance, sol: &FluidSolution) -> RoutingMatrix {
    let m = inst.zones;
    let mut q = vec![vec![0.0; m]; m];
    for i in 0..m {
        let inflow: f64 = (0..m).map(|k| inst.mu(k, i) * sol.f[k][i]).sum();
        if inflow <= 0.0 {
            q[i][i] = 1.0;
            continue;
        }
        let mut moved = 0.0;
        for j in (0..m).filter(|&j| j != i) {
            q[i][j] = (inst.mu(i, j) * sol.e[i][j] / inflow).max(0.0);
            moved += q[i][j];
        }
        if moved > 1.0 {
            q[i].iter_mut().for_each(|v| *v /= moved);
        } else {
            q[i][i] = 1.0 - moved;
        }
    }
    RoutingMatrix { q }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceTime {
    /// `r_ij / v`.
    Deterministic,
    /// Exponential with mean `r_ij / v`.
    Exponential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub hours: f64,
    pub slot_minutes: f64,
    pub warmup_fraction: f64,
    pub batches: usize,
    /// Slots an unmatched crowd driver stays available.
    pub cd_lifetime_slots: usize,
    pub service: ServiceTime,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            hours: 40.0,
            slot_minutes: 1.0,
            warmup_fraction: 0.2,
            batches: 20,
            cd_lifetime_slots: 1,
            service: ServiceTime::Deterministic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    pub hours: f64,
    pub measured_hours: f64,
    pub arrivals: Vec<Vec<u64>>,
    pub served_fd: Vec<Vec<u64>>,
    pub served_gw: Vec<Vec<u64>>,
    pub served_od: Vec<Vec<u64>>,
    pub penalized: Vec<Vec<u64>>,
    pub relocation_km: f64,
    /// Mean cost rate after warm-up ($/h) and its 95% half-width from batch means.
    pub cost_rate: f64,
    pub half_width: f64,
    /// Share of fleet time spent idle at each zone after warm-up.
    pub idle_fraction: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Leg {
    Delivery,
    Relocation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Arrival {
    time: f64,
    seq: u64,
    zone: usize,
    leg: Leg,
}

impl Eq for Arrival {}

impl Ord for Arrival {
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Arrival {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Largest-remainder split of `n` by `weights`.
fn apportion(n: u32, weights: &[f64]) -> Vec<u32> {
    let total: f64 = weights.iter().sum();
    let m = weights.len();
    if total <= 0.0 {
        let mut out = vec![n / m as u32; m];
        for v in out.iter_mut().take((n % m as u32) as usize) {
            *v += 1;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut out: Vec<u32> = exact.iter().map(|x| x.floor() as u32).collect();
    let mut rest: Vec<usize> = (0..m).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - out.iter().sum::<u32>();
    for &i in rest.iter().take(short as usize) {
        out[i] += 1;
    }
    out
}

#[derive(Clone, Copy)]
enum Option3 {
    Fd,
    Gw,
    Od,
    Penalty,
}

#[allow(clippy::too_many_arguments)]
pub fn simulate<R: Rng + ?Sized>(
    inst: &Instance,
    n_fd: u32,
    n_gw: u32,
    n_od: u32,
    t: usize,
    routing: &RoutingMatrix,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<SimStats, FluidError> {
    let m = inst.zones;
    let lambda = inst.demand_rates(t)?;
    let (lgw, lod) = inst.cd_arrival_rates(n_gw, n_od);
    let pr = &inst.request_pattern;
    let pgw = inst.gw_pattern();
    let pod = inst.od_pattern();
    let costs = inst.cost_matrices();
    let dt = cfg.slot_minutes / 60.0;
    let slots = (cfg.hours / dt).round().max(1.0) as usize;
    let warm = ((slots as f64) * cfg.warmup_fraction).floor() as usize;
    let measured = slots - warm;
    let batches = cfg.batches.clamp(1, measured.max(1));
    let lifetime = cfg.cd_lifetime_slots.max(1);

    let mut idle = apportion(n_fd, &lambda);
    let mut events: BinaryHeap<Arrival> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut arrivals = vec![vec![0u64; m]; m];
    let mut served = [vec![vec![0u64; m]; m], vec![vec![0u64; m]; m], vec![vec![0u64; m]; m]];
    let mut penalized = vec![vec![0u64; m]; m];
    let mut relocation_km = 0.0;
    let mut batch_cost = vec![0.0; batches];
    let mut idle_time = vec![0.0; m];
    // Crowd capacity per route, by remaining lifetime.
    let mut gw_pool: Vec<Vec<Vec<u64>>> = vec![vec![vec![0; m]; m]; lifetime];
    let mut od_pool: Vec<Vec<Vec<u64>>> = vec![vec![vec![0; m]; m]; lifetime];
    let mut requests: Vec<(usize, usize)> = Vec::new();
    let travel = |i: usize, j: usize, rng: &mut R| -> f64 {
        let mean = inst.distance_km[i][j] / inst.speed_kmh;
        match cfg.service {
            ServiceTime::Deterministic => mean,
            ServiceTime::Exponential => Exp::new(1.0 / mean).expect("positive rate").sample(rng),
        }
    };

    for slot in 0..slots {
        let now = slot as f64 * dt;
        let end = now + dt;
        let counting = slot >= warm;
        let batch = if counting { ((slot - warm) * batches / measured).min(batches - 1) } else { 0 };
        let mut cost = 0.0;

        // FDs that reached their destination by the start of the slot.
        while events.peek().is_some_and(|e| e.time <= now) {
            let e = events.pop().expect("peeked");
            match e.leg {
                Leg::Relocation => idle[e.zone] += 1,
                Leg::Delivery => {
                    let u: f64 = rng.random();
                    let row = &routing.q[e.zone];
                    let mut acc = 0.0;
                    let mut dest = e.zone;
                    for (k, &p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            dest = k;
                            break;
                        }
                    }
                    if dest == e.zone {
                        idle[e.zone] += 1;
                    } else {
                        let km = inst.distance_km[e.zone][dest];
                        if counting {
                            relocation_km += km;
                        }
                        cost += inst.costs.fd_per_km * km;
                        seq += 1;
                        events.push(Arrival { time: e.time + travel(e.zone, dest, rng), seq, zone: dest, leg: Leg::Relocation });
                    }
                }
            }
        }
        if counting {
            for i in 0..m {
                idle_time[i] += idle[i] as f64 * dt;
            }
        }

        // Age out crowd capacity and draw this slot's arrivals.
        gw_pool.rotate_left(1);
        od_pool.rotate_left(1);
        for pool in [&mut gw_pool, &mut od_pool] {
            pool[lifetime - 1].iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0));
        }
        requests.clear();
        for i in 0..m {
            for j in 0..m {
                for _ in 0..poisson(lambda[i] * pr[i][j] * dt, rng) {
                    requests.push((i, j));
                }
                gw_pool[lifetime - 1][i][j] = poisson(lgw[i] * pgw[i][j] * dt, rng);
                od_pool[lifetime - 1][i][j] = poisson(lod[i] * pod[i][j] * dt, rng);
            }
        }
        requests.shuffle(rng);

        for &(i, j) in &requests {
            arrivals[i][j] += 1;
            let gw_slot = (0..lifetime).find(|&l| gw_pool[l][i][j] > 0);
            let od_slot = (0..lifetime).find(|&l| od_pool[l][i][j] > 0);
            let mut best = (Option3::Penalty, costs.penalty[i][j]);
            for (opt, avail, c) in [
                (Option3::Fd, idle[i] > 0, costs.fd[i][j]),
                (Option3::Gw, gw_slot.is_some(), costs.gw[i][j]),
                (Option3::Od, od_slot.is_some(), costs.od[i][j]),
            ] {
                if avail && c < best.1 {
                    best = (opt, c);
                }
            }
            cost += best.1;
            match best.0 {
                Option3::Fd => {
                    idle[i] -= 1;
                    served[0][i][j] += 1;
                    seq += 1;
                    events.push(Arrival { time: end + travel(i, j, rng), seq, zone: j, leg: Leg::Delivery });
                }
                Option3::Gw => {
                    gw_pool[gw_slot.expect("available")][i][j] -= 1;
                    served[1][i][j] += 1;
                }
                Option3::Od => {
                    od_pool[od_slot.expect("available")][i][j] -= 1;
                    served[2][i][j] += 1;
                }
                Option3::Penalty => penalized[i][j] += 1,
            }
        }
        if counting {
            batch_cost[batch] += cost;
        }
    }

    let measured_hours = measured as f64 * dt;
    let batch_hours = measured_hours / batches as f64;
    let rates: Vec<f64> = batch_cost.iter().map(|c| c / batch_hours).collect();
    let (mean, sd) = crate::eval::mean_std(&rates);
    let half_width = if batches > 1 {
        let tq = StudentsT::new(0.0, 1.0, (batches - 1) as f64).expect("valid dof").inverse_cdf(0.975);
        tq * sd / (batches as f64).sqrt()
    } else {
        0.0
    };
    let fleet_hours = n_fd as f64 * measured_hours;
    let idle_fraction = idle_time.iter().map(|&x| if fleet_hours > 0.0 { x / fleet_hours } else { 0.0 }).collect();
    let [served_fd, served_gw, served_od] = served;
    Ok(SimStats {
        hours: slots as f64 * dt,
        measured_hours,
        arrivals,
        served_fd,
        served_gw,
        served_od,
        penalized,
        relocation_km,
        cost_rate: mean,
        half_width,
        idle_fraction,
    })
}

/// Whether the simulated rate respects the fluid lower bound, and by how much it exceeds it.
pub fn fluid_bound_check(sim_rate: f64, half_width: f64, lp_rate: f64) -> (bool, f64) {
    (sim_rate + half_width >= lp_rate - 1e-6 * lp_rate, sim_rate - lp_rate)
}
