//! Hotel revenue management with booking limits per product.
//!
//! A product is an (arrival day, stay length, rate class) triple for a
//! one-week horizon: 28 day/length pairs × 2 rate classes. Requests arrive
//! as Poisson streams before their arrival day and are processed in time
//! order. A request is accepted while its product's limit is positive;
//! acceptance earns the price and lowers by one (not below zero) the limit
//! of every product that shares a night with it.

use std::fmt;
use std::io;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use smoothgrad_core::program::SmoothReal;
use smoothgrad_core::{Cond, Exec, Program, ProgramError};

pub const NIGHTS: usize = 7;
pub const ROOMS: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateClass {
    Rack,
    Discount,
}

impl RateClass {
    fn label(self) -> &'static str {
        match self {
            RateClass::Rack => "rack",
            RateClass::Discount => "discount",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Product {
    /// First night, 1-based.
    pub arrival_day: usize,
    pub stay_len: usize,
    pub rate_class: RateClass,
    /// Expected requests over the booking horizon.
    pub arrival_rate: f64,
    pub price: f64,
}

impl Product {
    pub fn nights(&self) -> std::ops::Range<usize> {
        self.arrival_day..self.arrival_day + self.stay_len
    }

    pub fn overlaps(&self, o: &Product) -> bool {
        self.nights().start < o.nights().end && o.nights().start < self.nights().end
    }
}

#[derive(Debug)]
pub enum RatesError {
    Io(io::Error),
    Csv(csv::Error),
    Field { line: u64, field: &'static str, value: String },
    Invalid { line: u64, reason: &'static str },
}

impl fmt::Display for RatesError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatesError::Io(e) => write!(f, "rates file: {e}"),
            RatesError::Csv(e) => write!(f, "rates file: {e}"),
            RatesError::Field { line, field, value } => {
                write!(f, "rates file line {line}: bad {field} {value:?}")
            }
            RatesError::Invalid { line, reason } => write!(f, "rates file line {line}: {reason}"),
        }
    }
}

impl std::error::Error for RatesError {}

impl From<csv::Error> for RatesError {
    fn from(e: csv::Error) -> Self {
        RatesError::Csv(e)
    }
}

impl From<io::Error> for RatesError {
    fn from(e: io::Error) -> Self {
        RatesError::Io(e)
    }
}

const HEADER: [&str; 6] = ["product", "arrival_day", "stay_len", "rate_class", "arrival_rate", "price"];

/// Default table: rack price 100 per night, discount at 0.8 of rack,
/// 3 expected rack and 5 expected discount requests per product.
pub fn default_products() -> Vec<Product> {
    let mut out = Vec::with_capacity(56);
    for rate_class in [RateClass::Rack, RateClass::Discount] {
        for a in 1..=NIGHTS {
            for l in 1..=NIGHTS + 1 - a {
                let rack = 100.0 * l as f64;
                let (price, arrival_rate) = match rate_class {
                    RateClass::Rack => (rack, 3.0),
                    RateClass::Discount => (0.8 * rack, 5.0),
                };
                out.push(Product { arrival_day: a, stay_len: l, rate_class, arrival_rate, price });
            }
        }
    }
    out
}

pub fn write_products<W: io::Write>(products: &[Product], w: W) -> Result<(), RatesError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(HEADER)?;
    for (i, p) in products.iter().enumerate() {
        wr.write_record([
            i.to_string(),
            p.arrival_day.to_string(),
            p.stay_len.to_string(),
            p.rate_class.label().to_string(),
            p.arrival_rate.to_string(),
            p.price.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a rates table; rows are taken in file order.
pub fn read_products<R: io::Read>(r: R) -> Result<Vec<Product>, RatesError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize, field: &'static str| {
            rec.get(i).map(str::trim).ok_or(RatesError::Field { line, field, value: String::new() })
        };
        let num = |i: usize, field: &'static str| -> Result<f64, RatesError> {
            let s = get(i, field)?;
            s.parse().map_err(|_| RatesError::Field { line, field, value: s.to_string() })
        };
        let int = |i: usize, field: &'static str| -> Result<usize, RatesError> {
            let s = get(i, field)?;
            s.parse().map_err(|_| RatesError::Field { line, field, value: s.to_string() })
        };
        let rate_class = match get(3, "rate_class")?.to_ascii_lowercase().as_str() {
            "rack" => RateClass::Rack,
            "discount" => RateClass::Discount,
            v => return Err(RatesError::Field { line, field: "rate_class", value: v.to_string() }),
        };
        let p = Product {
            arrival_day: int(1, "arrival_day")?,
            stay_len: int(2, "stay_len")?,
            rate_class,
            arrival_rate: num(4, "arrival_rate")?,
            price: num(5, "price")?,
        };
        if p.arrival_day < 1 || p.stay_len < 1 || p.arrival_day + p.stay_len - 1 > NIGHTS {
            return Err(RatesError::Invalid { line, reason: "stay outside the week" });
        }
        if !(p.arrival_rate >= 0.0) || !p.arrival_rate.is_finite() || !p.price.is_finite() {
            return Err(RatesError::Invalid { line, reason: "rate and price must be finite, rate >= 0" });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_products(path: &Path) -> Result<Vec<Product>, RatesError> {
    read_products(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hotel {
    products: Vec<Product>,
    /// `overlap[p]`: products sharing a night with `p`, including `p`.
    overlap: Vec<Vec<usize>>,
}

impl Default for Hotel {
    fn default() -> Self {
        Self::new(default_products())
    }
}

/// Request stream and limits after a crisp run.
#[derive(Debug, Clone, PartialEq)]
pub struct HotelTrace {
    pub revenue: f64,
    pub accepted: Vec<usize>,
    pub min_limit: f64,
    pub max_occupancy: usize,
}

impl Hotel {
    pub fn new(products: Vec<Product>) -> Self {
        let overlap =
            products.iter().map(|p| (0..products.len()).filter(|&q| p.overlaps(&products[q])).collect()).collect();
        Self { products, overlap }
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    /// `(time, product)` requests in processing order.
    pub fn requests(&self, rng: &mut ChaCha8Rng) -> Vec<(f64, usize)> {
        let mut reqs = Vec::new();
        for (i, p) in self.products.iter().enumerate() {
            if p.arrival_rate <= 0.0 {
                continue;
            }
            let n = Poisson::new(p.arrival_rate).expect("positive rate").sample(rng) as usize;
            for _ in 0..n {
                reqs.push((rng.random_range(0.0..p.arrival_day as f64), i));
            }
        }
        reqs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        reqs
    }

    fn simulate<E: Exec>(
        &self,
        ex: &mut E,
        x: &[E::Real],
        mut on_accept: impl FnMut(usize),
    ) -> Result<(E::Real, Vec<E::Real>), ProgramError> {
        let reqs = self.requests(ex.rng());
        let mut state = (E::Real::from(0.0), x.to_vec());
        let zero = E::Real::from(0.0);
        for (_, p) in reqs {
            let price = self.products[p].price;
            let limit = state.1[p].clone();
            let mut accepted = false;
            ex.when(Cond::gt(limit, 0.0), &mut state, |_, (rev, limits)| {
                *rev += price;
                for &q in &self.overlap[p] {
                    limits[q] = (limits[q].clone() - 1.0).max(&zero);
                }
                accepted = true;
                Ok(())
            })?;
            if accepted {
                on_accept(p);
            }
        }
        Ok(state)
    }

    /// Crisp run with acceptance bookkeeping.
    pub fn trace(&self, x: &[f64], seed: u64) -> Result<HotelTrace, ProgramError> {
        let mut accepted = Vec::new();
        let mut ex = smoothgrad_core::program::CrispExec::new(seed);
        let (revenue, limits) = self.simulate(&mut ex, x, |p| accepted.push(p))?;
        let mut occ = [0usize; NIGHTS + 1];
        for &p in &accepted {
            for n in self.products[p].nights() {
                occ[n] += 1;
            }
        }
        Ok(HotelTrace {
            revenue,
            min_limit: limits.iter().copied().fold(f64::INFINITY, f64::min),
            max_occupancy: occ.iter().copied().max().unwrap_or(0),
            accepted,
        })
    }
}

impl Program for Hotel {
    fn name(&self) -> String {
        "hotel".into()
    }

    fn dim(&self) -> usize {
        self.products.len()
    }

    /// Negated revenue.
    fn run<E: Exec>(&self, ex: &mut E, x: &[E::Real]) -> Result<E::Real, ProgramError> {
        Ok(-self.simulate(ex, x, |_| {})?.0)
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, ROOMS))
    }

    fn stochastic(&self) -> bool {
        true
    }

    fn maximizes(&self) -> bool {
        true
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(0.0..ROOMS)).collect()
    }
}
