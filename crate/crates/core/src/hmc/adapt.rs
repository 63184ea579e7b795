/// Nesterov dual averaging of `log(step size)` toward a target acceptance.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    target: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAveraging {
    pub fn new(target: f64, step_size: f64) -> Self {
        Self {
            target,
            mu: (10.0 * step_size).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            gamma: 0.1,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    /// Feed one acceptance statistic; returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup windows: an initial fast buffer (15%), doubling slow windows
/// (75%, base size 25) where the metric is estimated, and a terminal fast
/// buffer (10%).
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_end: usize,
    counter: usize,
}

impl WindowSchedule {
    pub fn new(warmup: usize) -> Self {
        let init_buffer = (0.15 * warmup as f64) as usize;
        let term_buffer = (0.10 * warmup as f64) as usize;
        let slow = warmup - init_buffer - term_buffer;
        let window_size = 25.min(slow);
        let mut s = Self {
            warmup,
            init_buffer,
            term_buffer,
            window_size,
            next_end: init_buffer + window_size - 1,
            counter: 0,
        };
        // a first window that would leave too little room absorbs the rest
        if s.next_end + 2 * window_size >= warmup - term_buffer {
            s.next_end = warmup - term_buffer - 1;
        }
        s
    }

    pub fn in_slow_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    pub fn end_of_window(&self) -> bool {
        self.counter == self.next_end && self.counter != self.warmup
    }

    pub fn advance(&mut self) {
        if self.end_of_window() {
            self.compute_next_window();
        }
        self.counter += 1;
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_end == last {
            self.next_end = usize::MAX;
            return;
        }
        self.window_size *= 2;
        self.next_end = self.counter + self.window_size;
        if self.next_end != last && self.next_end + 2 * self.window_size >= last + 1 {
            self.next_end = last;
        }
    }

    /// Iteration indices at which slow windows end.
    pub fn window_ends(warmup: usize) -> Vec<usize> {
        let mut s = Self::new(warmup);
        let mut ends = Vec::new();
        for i in 0..warmup {
            if s.end_of_window() {
                ends.push(i);
            }
            s.advance();
        }
        ends
    }
}

/// Streaming mean and variance.
#[derive(Debug, Clone)]
pub(crate) struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub(crate) fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / self.n as f64;
            *s += delta * (v - *m);
        }
    }

    /// Sample variance shrunk toward `1e-3`.
    pub(crate) fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}
