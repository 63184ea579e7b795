use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Target;

/// Energy error above which a transition is marked divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub log_density: f64,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub point: PhasePoint,
    pub accept_stat: f64,
    pub divergent: bool,
    pub depth: usize,
    pub n_leapfrog: usize,
}

/// One leapfrog step of size `eps` with diagonal inverse metric.
pub fn leapfrog<T: Target + ?Sized>(target: &T, z: &mut PhasePoint, eps: f64, inv_metric: &[f64]) {
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * eps * g;
    }
    for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(inv_metric) {
        *q += eps * m * p;
    }
    z.log_density = target.log_density_gradient(&z.q, &mut z.grad);
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * eps * g;
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    crate::stats::log_add_exp(a, b)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Generalised no-U-turn check on momentum sum `rho`.
fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

pub struct Nuts<'a, T: Target + ?Sized> {
    target: &'a T,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub max_depth: usize,
    divergent: bool,
}

struct Subtree {
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    rho: Vec<f64>,
    log_sum_weight: f64,
    propose: PhasePoint,
}

impl<'a, T: Target + ?Sized> Nuts<'a, T> {
    pub fn new(target: &'a T, max_depth: usize) -> Self {
        Self {
            target,
            step_size: 1.0,
            inv_metric: vec![1.0; target.dim()],
            max_depth,
            divergent: false,
        }
    }

    fn hamiltonian(&self, z: &PhasePoint) -> f64 {
        let kinetic: f64 = z
            .p
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, m)| m * p * p)
            .sum();
        let h = -z.log_density + 0.5 * kinetic;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, z: &PhasePoint) -> Vec<f64> {
        z.p.iter().zip(&self.inv_metric).map(|(p, m)| m * p).collect()
    }

    fn sample_momentum(&self, z: &mut PhasePoint, rng: &mut ChaCha8Rng) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    /// Uniform draws on `[-2, 2]^dim` until the density and gradient are finite.
    pub fn initialise(&self, rng: &mut ChaCha8Rng, attempts: usize) -> Option<PhasePoint> {
        let dim = self.target.dim();
        for _ in 0..attempts {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut grad = vec![0.0; dim];
            let lp = self.target.log_density_gradient(&q, &mut grad);
            if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
                return Some(PhasePoint {
                    q,
                    p: vec![0.0; dim],
                    grad,
                    log_density: lp,
                });
            }
        }
        None
    }

    /// Double or halve the step size until a single leapfrog step's
    /// acceptance crosses 0.8.
    pub fn init_step_size(&mut self, z0: &PhasePoint, rng: &mut ChaCha8Rng) -> Result<(), ()> {
        let target_log = 0.8f64.ln();
        let mut z = z0.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);
        leapfrog(self.target, &mut z, self.step_size, &self.inv_metric);
        let delta = h0 - self.hamiltonian(&z);
        let direction = if delta > target_log { 1 } else { -1 };
        loop {
            let mut z = z0.clone();
            self.sample_momentum(&mut z, rng);
            let h0 = self.hamiltonian(&z);
            leapfrog(self.target, &mut z, self.step_size, &self.inv_metric);
            let delta = h0 - self.hamiltonian(&z);
            if direction == 1 && !(delta > target_log) {
                break;
            }
            if direction == -1 && !(delta < target_log) {
                break;
            }
            self.step_size *= if direction == 1 { 2.0 } else { 0.5 };
            if self.step_size > 1e7 || self.step_size == 0.0 {
                return Err(());
            }
        }
        Ok(())
    }

    pub fn transition(&mut self, start: &PhasePoint, rng: &mut ChaCha8Rng) -> Transition {
        let mut z = start.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);
        let p_sharp0 = self.p_sharp(&z);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();

        let mut p_sharp_fwd_fwd = p_sharp0.clone();
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp0.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp0.clone();
        let mut p_sharp_bck_bck = p_sharp0;

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut n_leapfrog = 0;
        let mut sum_metro = 0.0;
        let mut depth = 0;
        self.divergent = false;

        while depth < self.max_depth {
            let forward = rng.random::<f64>() > 0.5;
            let (rho_fwd, rho_bck, valid, lsw_sub, propose);
            if forward {
                let mut cur = z_fwd.clone();
                let (ok, sub) =
                    self.build_tree(depth, &mut cur, h0, 1.0, &mut n_leapfrog, &mut sum_metro, rng);
                z_fwd = cur;
                rho_bck = rho.clone();
                p_bck_fwd = p_fwd_bck.clone();
                p_sharp_bck_fwd = p_sharp_fwd_bck.clone();
                valid = ok;
                match sub {
                    Some(s) => {
                        p_sharp_fwd_bck = s.p_sharp_beg;
                        p_sharp_fwd_fwd = s.p_sharp_end;
                        p_fwd_bck = s.p_beg;
                        rho_fwd = s.rho;
                        lsw_sub = s.log_sum_weight;
                        propose = Some(s.propose);
                    }
                    None => {
                        rho_fwd = vec![0.0; rho.len()];
                        lsw_sub = f64::NEG_INFINITY;
                        propose = None;
                    }
                }
            } else {
                let mut cur = z_bck.clone();
                let (ok, sub) =
                    self.build_tree(depth, &mut cur, h0, -1.0, &mut n_leapfrog, &mut sum_metro, rng);
                z_bck = cur;
                rho_fwd = rho.clone();
                p_fwd_bck = p_bck_fwd.clone();
                p_sharp_fwd_bck = p_sharp_bck_fwd.clone();
                valid = ok;
                match sub {
                    Some(s) => {
                        p_sharp_bck_fwd = s.p_sharp_beg;
                        p_sharp_bck_bck = s.p_sharp_end;
                        p_bck_fwd = s.p_beg;
                        rho_bck = s.rho;
                        lsw_sub = s.log_sum_weight;
                        propose = Some(s.propose);
                    }
                    None => {
                        rho_bck = vec![0.0; rho.len()];
                        lsw_sub = f64::NEG_INFINITY;
                        propose = None;
                    }
                }
            }
            if !valid {
                break;
            }
            depth += 1;
            let propose = propose.expect("valid subtree has a proposal");
            if lsw_sub > log_sum_weight {
                z_sample = propose;
            } else {
                let accept = (lsw_sub - log_sum_weight).exp();
                if rng.random::<f64>() < accept {
                    z_sample = propose;
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_sub);
            rho = sum(&rho_bck, &rho_fwd);

            let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let rho_ext = sum(&rho_bck, &p_fwd_bck);
            persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
            let rho_ext = sum(&rho_fwd, &p_bck_fwd);
            persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }
        Transition {
            point: z_sample,
            accept_stat: if n_leapfrog > 0 {
                sum_metro / n_leapfrog as f64
            } else {
                0.0
            },
            divergent: self.divergent,
            depth,
            n_leapfrog,
        }
    }

    /// Build a subtree of `2^depth` leapfrog steps from `z` (updated in place
    /// to the new trajectory end). Returns validity and, when the recursion
    /// completed, the subtree summary.
    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut PhasePoint,
        h0: f64,
        sign: f64,
        n_leapfrog: &mut usize,
        sum_metro: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> (bool, Option<Subtree>) {
        if depth == 0 {
            leapfrog(self.target, z, sign * self.step_size, &self.inv_metric);
            *n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            let p_sharp = self.p_sharp(z);
            let sub = Subtree {
                p_sharp_beg: p_sharp.clone(),
                p_sharp_end: p_sharp,
                p_beg: z.p.clone(),
                p_end: z.p.clone(),
                rho: z.p.clone(),
                log_sum_weight: h0 - h,
                propose: z.clone(),
            };
            return (!self.divergent, Some(sub));
        }
        let (ok, init) = self.build_tree(depth - 1, z, h0, sign, n_leapfrog, sum_metro, rng);
        if !ok {
            return (false, None);
        }
        let init = init.unwrap();
        let (ok, fin) = self.build_tree(depth - 1, z, h0, sign, n_leapfrog, sum_metro, rng);
        if !ok {
            return (false, None);
        }
        let fin = fin.unwrap();

        let lsw = log_sum_exp(init.log_sum_weight, fin.log_sum_weight);
        let propose = if fin.log_sum_weight > lsw {
            fin.propose
        } else {
            let accept = (fin.log_sum_weight - lsw).exp();
            if rng.random::<f64>() < accept {
                fin.propose
            } else {
                init.propose
            }
        };
        let mut rho = init.rho.clone();
        add_into(&mut rho, &fin.rho);

        let mut persist = no_u_turn(&init.p_sharp_beg, &fin.p_sharp_end, &rho);
        let rho_ext = sum(&init.rho, &fin.p_beg);
        persist &= no_u_turn(&init.p_sharp_beg, &fin.p_sharp_beg, &rho_ext);
        let rho_ext = sum(&fin.rho, &init.p_end);
        persist &= no_u_turn(&init.p_sharp_end, &fin.p_sharp_end, &rho_ext);

        let sub = Subtree {
            p_sharp_beg: init.p_sharp_beg,
            p_sharp_end: fin.p_sharp_end,
            p_beg: init.p_beg,
            p_end: fin.p_end,
            rho,
            log_sum_weight: lsw,
            propose,
        };
        (persist, Some(sub))
    }
}
