//! Line-based text serialization of a fitted model.
//!
//! Floats are written with 17 significant digits so a save/load/save cycle
//! is byte-identical and `Θ` is restored bitwise.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::basis::SplineSpace;
use crate::error::{FpcaError, Result};
use crate::eval::FpcEstimate;
use crate::fit::{FitConfig, FitOutput};
use crate::manifold::GeneralizedStiefel;
use crate::model::ModelParams;
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "streamfpca-model";

/// Provenance of a fitted model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FitMeta {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub subjects: usize,
    pub optimizer: String,
    pub averaging: bool,
}

/// Everything needed to evaluate the fitted components.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile<T: Scalar> {
    pub degree: usize,
    pub inner_knots: Vec<usize>,
    pub domain: Vec<(T, T)>,
    /// `p × R`, rows indexed by basis function.
    pub theta: DMatrix<T>,
    pub lambda: DVector<T>,
    pub sigma2: T,
    pub delta: T,
    /// Frozen smoothing parameter after tuning.
    pub tau: T,
    /// `(block, τ)` of the best candidate after each tuning block.
    pub tau_path: Vec<(usize, T)>,
    pub meta: FitMeta,
}

fn num<T: Scalar>(x: T) -> String {
    format!("{x:.16e}")
}

fn bad(line: usize, reason: String) -> FpcaError {
    FpcaError::Parse { line, reason }
}

fn float<T: Scalar>(line: usize, s: &str) -> Result<T> {
    s.parse::<f64>()
        .map(T::lit)
        .map_err(|_| bad(line, format!("`{s}` is not a number")))
}

fn int(line: usize, s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| bad(line, format!("`{s}` is not a nonnegative integer")))
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| bad(0, format!("unexpected end of file, expected {what}")))
    }

    /// A `key value` line with the given key.
    fn field(&mut self, key: &str) -> Result<(usize, String)> {
        let (line, text) = self.next(key)?;
        match text.split_once(' ') {
            Some((k, v)) if k == key => Ok((line, v.trim().to_string())),
            _ if text == key => Ok((line, String::new())),
            _ => Err(bad(line, format!("expected `{key}`, found `{text}`"))),
        }
    }
}

impl<T: Scalar> ModelFile<T> {
    pub fn from_fit(output: &FitOutput<T>, config: &FitConfig) -> Self {
        let est = &output.estimate;
        Self {
            degree: config.degree,
            inner_knots: config.inner_knots.clone(),
            domain: config
                .domain
                .iter()
                .map(|&(a, b)| (T::lit(a), T::lit(b)))
                .collect(),
            theta: est.theta.matrix().clone(),
            lambda: est.lambda(),
            sigma2: est.sigma2(),
            delta: est.delta,
            tau: output.tau,
            tau_path: output.selected_path.clone(),
            meta: FitMeta {
                seed: config.seed,
                epochs: config.epochs,
                steps: output.steps,
                subjects: output.n_subjects,
                optimizer: config.optimizer.name().into(),
                averaging: config.averaging,
            },
        }
    }

    pub fn rank(&self) -> usize {
        self.theta.ncols()
    }

    pub fn space(&self) -> Result<SplineSpace<T>> {
        SplineSpace::new(&self.domain, &self.inner_knots, self.degree)
    }

    /// Rebuilds `Ψ`, checking the shape against the basis and `ΘᵀGΘ = I`.
    pub fn params(&self) -> Result<(SplineSpace<T>, ModelParams<T>)> {
        let space = self.space()?;
        if self.theta.nrows() != space.len() {
            return Err(FpcaError::State(format!(
                "Θ has {} rows but the basis has {} functions",
                self.theta.nrows(),
                space.len()
            )));
        }
        let manifold = GeneralizedStiefel::new(space.gram().clone())?;
        let theta = manifold.point(self.theta.clone())?;
        let params = ModelParams::from_variances(theta, &self.lambda, self.sigma2, self.delta)?;
        Ok((space, params))
    }

    pub fn estimate(&self) -> Result<FpcEstimate<T>> {
        let (space, params) = self.params()?;
        FpcEstimate::new(space, params.theta, self.lambda.clone(), self.sigma2)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "{MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(s, "degree {}", self.degree);
        let _ = writeln!(
            s,
            "inner_knots {}",
            join(&mut self.inner_knots.iter().map(|k| k.to_string()))
        );
        let _ = writeln!(
            s,
            "domain {}",
            join(
                &mut self
                    .domain
                    .iter()
                    .map(|&(a, b)| format!("{}:{}", num(a), num(b)))
            )
        );
        let _ = writeln!(s, "delta {}", num(self.delta));
        let _ = writeln!(s, "sigma2 {}", num(self.sigma2));
        let _ = writeln!(
            s,
            "lambda {}",
            join(&mut self.lambda.iter().map(|&l| num(l)))
        );
        let _ = writeln!(s, "tau {}", num(self.tau));
        let _ = writeln!(s, "seed {}", self.meta.seed);
        let _ = writeln!(s, "epochs {}", self.meta.epochs);
        let _ = writeln!(s, "steps {}", self.meta.steps);
        let _ = writeln!(s, "subjects {}", self.meta.subjects);
        let _ = writeln!(s, "optimizer {}", self.meta.optimizer);
        let _ = writeln!(s, "averaging {}", self.meta.averaging);
        let _ = writeln!(s, "tau_path {}", self.tau_path.len());
        for &(block, tau) in &self.tau_path {
            let _ = writeln!(s, "{block} {}", num(tau));
        }
        let _ = writeln!(s, "theta {} {}", self.theta.nrows(), self.theta.ncols());
        for row in self.theta.row_iter() {
            let _ = writeln!(s, "{}", join(&mut row.iter().map(|&x| num(x))));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rd = Reader {
            lines: text.lines().enumerate(),
        };
        let (line, version) = rd.field(MAGIC)?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(line, format!("unsupported format version `{version}`")));
        }
        let (line, v) = rd.field("degree")?;
        let degree = int(line, &v)?;
        let (line, v) = rd.field("inner_knots")?;
        let inner_knots = v
            .split_whitespace()
            .map(|k| int(line, k))
            .collect::<Result<Vec<_>>>()?;
        let (line, v) = rd.field("domain")?;
        let domain = v
            .split_whitespace()
            .map(|pair| {
                let (a, b) = pair
                    .split_once(':')
                    .ok_or_else(|| bad(line, format!("domain interval `{pair}` needs lo:hi")))?;
                Ok((float(line, a)?, float(line, b)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (line, v) = rd.field("delta")?;
        let delta = float(line, &v)?;
        let (line, v) = rd.field("sigma2")?;
        let sigma2 = float(line, &v)?;
        let (line, v) = rd.field("lambda")?;
        let lambda: Vec<T> = v
            .split_whitespace()
            .map(|x| float(line, x))
            .collect::<Result<_>>()?;
        let (line, v) = rd.field("tau")?;
        let tau = float(line, &v)?;
        let (line, v) = rd.field("seed")?;
        let seed = v
            .parse::<u64>()
            .map_err(|_| bad(line, format!("`{v}` is not a seed")))?;
        let (line, v) = rd.field("epochs")?;
        let epochs = int(line, &v)?;
        let (line, v) = rd.field("steps")?;
        let steps = int(line, &v)?;
        let (line, v) = rd.field("subjects")?;
        let subjects = int(line, &v)?;
        let (_, optimizer) = rd.field("optimizer")?;
        let (line, v) = rd.field("averaging")?;
        let averaging = v
            .parse::<bool>()
            .map_err(|_| bad(line, format!("`{v}` is not true or false")))?;
        let (line, v) = rd.field("tau_path")?;
        let n_path = int(line, &v)?;
        let mut tau_path = Vec::with_capacity(n_path);
        for _ in 0..n_path {
            let (line, text) = rd.next("tau path entry")?;
            let (b, t) = text
                .split_once(' ')
                .ok_or_else(|| bad(line, "tau path entry needs `block tau`".into()))?;
            tau_path.push((int(line, b)?, float(line, t.trim())?));
        }
        let (line, v) = rd.field("theta")?;
        let dims: Vec<usize> = v
            .split_whitespace()
            .map(|x| int(line, x))
            .collect::<Result<_>>()?;
        let [p, r] = dims[..] else {
            return Err(bad(line, "theta header needs `rows cols`".into()));
        };
        if lambda.len() != r {
            return Err(bad(
                line,
                format!("{} eigenvalues for {r} components", lambda.len()),
            ));
        }
        let mut theta = DMatrix::zeros(p, r);
        for i in 0..p {
            let (line, text) = rd.next("theta row")?;
            let row: Vec<T> = text
                .split_whitespace()
                .map(|x| float(line, x))
                .collect::<Result<_>>()?;
            if row.len() != r {
                return Err(bad(
                    line,
                    format!("theta row has {} entries, expected {r}", row.len()),
                ));
            }
            for (j, x) in row.into_iter().enumerate() {
                theta[(i, j)] = x;
            }
        }
        if let Some((i, text)) = rd.lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(bad(i + 1, format!("trailing content `{}`", text.trim())));
        }
        Ok(Self {
            degree,
            inner_knots,
            domain,
            theta,
            lambda: DVector::from_vec(lambda),
            sigma2,
            delta,
            tau,
            tau_path,
            meta: FitMeta {
                seed,
                epochs,
                steps,
                subjects,
                optimizer,
                averaging,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    /// Reads and validates a model; infeasible `Θ` is rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let model = Self::parse(&std::fs::read_to_string(path)?)?;
        model.params()?;
        Ok(model)
    }
}
