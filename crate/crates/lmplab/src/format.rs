//! On-disk formats: grid case files, JSON Lines datasets, model checkpoints,
//! training history CSV. Every real is written with 17 significant digits so
//! a write/read cycle reproduces the `f64` bits.

use std::io::{self, Write};

use lmplab_core::dataset::{Dataset, FeatureColumn, FeatureSchema, NormalizationStats, Scenario};
use lmplab_core::grid::{Edge, Grid};
use lmplab_core::linalg::Matrix;
use lmplab_core::nn::{Activation, Architecture, Model, ModelKind};
use lmplab_core::training::History;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{what}, line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] lmplab_core::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// `v` in scientific notation with 17 significant digits.
pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

/// JSON formatter that prints floats with 17 significant digits and maps
/// non-finite values to `null`.
struct Sig17<F>(F);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(w $(, $arg)*)
            }
        )*
    };
}

impl<F: Formatter> Formatter for Sig17<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        if v.is_finite() {
            w.write_all(real(v).as_bytes())
        } else {
            w.write_all(b"null")
        }
    }

    delegate! {
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    }
}

/// Serializes `value` as JSON with 17-digit reals.
pub fn to_json<T: Serialize + ?Sized>(value: &T, pretty: bool) -> Result<String> {
    let mut buf = Vec::new();
    if pretty {
        let mut ser =
            serde_json::Serializer::with_formatter(&mut buf, Sig17(PrettyFormatter::new()));
        value.serialize(&mut ser)?;
    } else {
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(CompactFormatter));
        value.serialize(&mut ser)?;
    }
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

// ---------------------------------------------------------------- case file

pub fn write_case(grid: &Grid) -> String {
    let mut out = format!(
        "gridcase 1 {} {} {}\n",
        grid.n_nodes(),
        grid.n_edges(),
        grid.reference()
    );
    for e in grid.edges() {
        out.push_str(&format!(
            "edge {} {} {} {}\n",
            e.from,
            e.to,
            real(e.reactance),
            real(e.flow_limit)
        ));
    }
    out
}

pub fn read_case(text: &str) -> Result<Grid> {
    let err = |line: usize, msg: String| FormatError::Parse {
        what: "case file",
        line,
        msg,
    };
    let mut header: Option<(usize, usize, usize)> = None;
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match (tok[0], header) {
            ("gridcase", None) => {
                if tok.len() != 5 || tok[1] != "1" {
                    return Err(err(line_no, "expected `gridcase 1 <N> <E> <ref>`".into()));
                }
                let num = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|e| err(line_no, format!("{s:?}: {e}")))
                };
                header = Some((num(tok[2])?, num(tok[3])?, num(tok[4])?));
            }
            ("gridcase", Some(_)) => return Err(err(line_no, "duplicate header".into())),
            ("edge", Some(_)) => {
                if tok.len() != 5 {
                    return Err(err(line_no, "expected `edge <i> <j> <x> <fmax>`".into()));
                }
                let idx = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|e| err(line_no, format!("{s:?}: {e}")))
                };
                let val = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|e| err(line_no, format!("{s:?}: {e}")))
                };
                edges.push(Edge::new(
                    idx(tok[1])?,
                    idx(tok[2])?,
                    val(tok[3])?,
                    val(tok[4])?,
                ));
            }
            ("edge", None) => return Err(err(line_no, "edge before header".into())),
            (other, _) => return Err(err(line_no, format!("unknown record {other:?}"))),
        }
    }
    let (n, m, reference) = header.ok_or_else(|| err(0, "missing header".into()))?;
    if edges.len() != m {
        return Err(FormatError::Invalid(format!(
            "header announces {m} edges, found {}",
            edges.len()
        )));
    }
    Ok(Grid::new(n, edges, reference)?)
}

// ------------------------------------------------------------------ dataset

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    grid_hash: String,
    n: usize,
    d: usize,
    columns: Vec<String>,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRecord {
    x: Vec<Vec<f64>>,
    pi: Vec<f64>,
    p: Vec<f64>,
    f: Vec<f64>,
    lambda: f64,
    congested: Vec<usize>,
}

pub fn write_dataset(ds: &Dataset) -> Result<String> {
    let header = DatasetHeader {
        format: "lmpds".into(),
        version: 1,
        grid_hash: ds.grid_hash.clone(),
        n: ds.n_nodes(),
        d: ds.schema.d(),
        columns: ds
            .schema
            .columns()
            .iter()
            .map(|c| c.name().to_string())
            .collect(),
        count: ds.len(),
    };
    let mut out = to_json(&header, false)?;
    out.push('\n');
    for s in &ds.scenarios {
        let rec = ScenarioRecord {
            x: (0..s.features.rows())
                .map(|r| s.features.row(r).to_vec())
                .collect(),
            pi: s.pi.clone(),
            p: s.p_star.clone(),
            f: s.f_star.clone(),
            lambda: s.lambda,
            congested: s.congested_lines.clone(),
        };
        out.push_str(&to_json(&rec, false)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_schema(names: &[String]) -> Result<FeatureSchema> {
    let cols = names
        .iter()
        .map(|n| {
            FeatureColumn::parse(n)
                .ok_or_else(|| FormatError::Invalid(format!("unknown feature column {n:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSchema::new(cols)?)
}

pub fn read_dataset(text: &str) -> Result<Dataset> {
    let err = |line: usize, msg: String| FormatError::Parse {
        what: "dataset",
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| err(1, e.to_string()))?;
    if header.format != "lmpds" || header.version != 1 {
        return Err(err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let schema = parse_schema(&header.columns)?;
    if schema.d() != header.d {
        return Err(err(
            1,
            format!("d = {} but {} columns", header.d, schema.d()),
        ));
    }
    let mut scenarios = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let rec: ScenarioRecord =
            serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
        let n = header.n;
        if rec.x.len() != n
            || rec.x.iter().any(|r| r.len() != header.d)
            || rec.pi.len() != n
            || rec.p.len() != n
        {
            return Err(err(
                i + 1,
                format!("scenario does not match n = {n}, d = {}", header.d),
            ));
        }
        let features = Matrix::from_rows(n, header.d, rec.x.concat());
        scenarios.push(Scenario {
            features,
            pi: rec.pi,
            p_star: rec.p,
            f_star: rec.f,
            lambda: rec.lambda,
            congested_lines: rec.congested,
        });
    }
    if scenarios.len() != header.count {
        return Err(FormatError::Invalid(format!(
            "header announces {} scenarios, found {}",
            header.count,
            scenarios.len()
        )));
    }
    Ok(Dataset {
        grid_hash: header.grid_hash,
        schema,
        scenarios,
    })
}

// --------------------------------------------------------------- checkpoint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsRecord {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

impl From<&NormalizationStats> for StatsRecord {
    fn from(s: &NormalizationStats) -> Self {
        Self {
            feature_mean: s.feature_mean.clone(),
            feature_std: s.feature_std.clone(),
            label_mean: s.label_mean,
            label_std: s.label_std,
        }
    }
}

impl From<StatsRecord> for NormalizationStats {
    fn from(s: StatsRecord) -> Self {
        Self {
            feature_mean: s.feature_mean,
            feature_std: s.feature_std,
            label_mean: s.label_mean,
            label_std: s.label_std,
        }
    }
}

/// Checkpoint document. `params` follow the model's flat order: filter
/// values in edge-list order, then per-layer maps row-major, then biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub grid_hash: String,
    pub dims: Vec<usize>,
    #[serde(rename = "K")]
    pub k: usize,
    pub activation: String,
    pub columns: Vec<String>,
    pub normalization: StatsRecord,
    pub params: Vec<f64>,
    pub tool_version: String,
    pub config_digest: String,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        schema: &FeatureSchema,
        stats: &NormalizationStats,
        config_digest: &str,
    ) -> Self {
        let arch = model.architecture();
        Self {
            format: "lmpnn".into(),
            version: 1,
            kind: arch.kind.name().into(),
            grid_hash: model.grid_hash().into(),
            dims: arch.dims.clone(),
            k: arch.order,
            activation: arch.hidden_activation.name().into(),
            columns: schema
                .columns()
                .iter()
                .map(|c| c.name().to_string())
                .collect(),
            normalization: stats.into(),
            params: model.params().to_vec(),
            tool_version: crate::TOOL_VERSION.into(),
            config_digest: config_digest.into(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != "lmpnn" || ck.version != 1 {
            return Err(FormatError::Invalid(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let kind = ModelKind::parse(&self.kind)
            .ok_or_else(|| FormatError::Invalid(format!("unknown kind {:?}", self.kind)))?;
        let act = Activation::parse(&self.activation).ok_or_else(|| {
            FormatError::Invalid(format!("unknown activation {:?}", self.activation))
        })?;
        Ok(Architecture {
            kind,
            dims: self.dims.clone(),
            order: self.k,
            hidden_activation: act,
        })
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        parse_schema(&self.columns)
    }

    pub fn stats(&self) -> NormalizationStats {
        self.normalization.clone().into()
    }

    /// Rebuilds the model on `grid`, which must hash to `grid_hash`.
    pub fn model(&self, grid: &Grid) -> Result<Model> {
        if grid.hash() != self.grid_hash {
            return Err(FormatError::Core(lmplab_core::Error::SchemaMismatch(
                format!(
                    "checkpoint was trained on grid {}, got {}",
                    self.grid_hash,
                    grid.hash()
                ),
            )));
        }
        Ok(Model::from_parameters(
            self.architecture()?,
            grid,
            self.params.clone(),
        )?)
    }
}

// ------------------------------------------------------------------ history

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_normalized_l2,val_violation_rate";

pub fn write_history(h: &History) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in &h.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            real(r.train_loss),
            real(r.val_loss),
            real(r.val_normalized_l2),
            real(r.val_violation_rate)
        ));
    }
    out
}
