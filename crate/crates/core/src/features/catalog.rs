use std::cell::OnceCell;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::effective_medium::{dem, mga, sca};
use super::morphology::{
    distance_transform, label_blobs, path_means, pixel_cross, Blob, Direction, DistanceMetric, MeanType, Statistic,
};
use super::Subgrid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    High,
    Low,
}

impl Phase {
    fn tag(self) -> &'static str {
        match self {
            Phase::High => "hi",
            Phase::Low => "lo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    Mga,
    Sca,
    Dem,
}

/// Which phase plays the matrix in MGA / DEM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixPhase {
    Low,
    High,
    /// Low phase is the matrix when the high-phase fraction is below one half.
    #[default]
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Morphological {
    /// Convex hull area per blob, reduced over blobs.
    ConvexArea { phase: Phase, stat: Statistic },
    /// Bounding-box extent per blob, reduced over blobs.
    Extent {
        phase: Phase,
        direction: Direction,
        stat: Statistic,
    },
    /// Distance from every pixel to the nearest pixel of `phase`, reduced over pixels.
    Distance {
        phase: Phase,
        #[serde(default)]
        metric: DistanceMetric,
        stat: Statistic,
    },
    /// Pixels of `phase` on each straight line, reduced over lines.
    PixelCross {
        phase: Phase,
        direction: Direction,
        stat: Statistic,
    },
    /// Log generalized mean of conductivity along each line, reduced over lines.
    PathMean {
        mean: MeanType,
        direction: Direction,
        stat: Statistic,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum FeatureKind {
    Constant,
    /// Enters as `log(lambda_eff)`.
    EffectiveMedium {
        formula: Formula,
        #[serde(default)]
        matrix: MatrixPhase,
    },
    Morphological(Morphological),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureEntry {
    pub fn new(name: impl Into<String>, kind: FeatureKind) -> Self {
        FeatureEntry { name: name.into(), kind }
    }
}

/// Per-column affine map `(x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Ordered feature functions; the order is the column order of the design matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCatalog {
    entries: Vec<FeatureEntry>,
    #[serde(default)]
    normalization: Option<Normalization>,
}

impl FeatureCatalog {
    /// Validates names and puts the constant feature in column 0, inserting it if missing.
    pub fn new(mut entries: Vec<FeatureEntry>) -> Result<Self> {
        let constants: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == FeatureKind::Constant)
            .map(|(i, _)| i)
            .collect();
        match constants.as_slice() {
            [] => entries.insert(0, FeatureEntry::new("constant", FeatureKind::Constant)),
            [0] => {}
            [i] => {
                let c = entries.remove(*i);
                entries.insert(0, c);
            }
            _ => return Err(Error::Config("catalog lists the constant feature more than once".into())),
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.name.is_empty() {
                return Err(Error::Config("feature names must be non-empty".into()));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate feature name '{}'", e.name)));
            }
        }
        Ok(FeatureCatalog {
            entries,
            normalization: None,
        })
    }

    /// Parses a JSON list of `{name, kind, params}` objects.
    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<FeatureEntry> =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("feature catalog: {e}")))?;
        Self::new(entries)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("catalog entries serialize")
    }

    pub fn entries(&self) -> &[FeatureEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn set_normalization(&mut self, n: Normalization) -> Result<()> {
        if n.shift.len() != self.len() || n.scale.len() != self.len() {
            return Err(Error::Config(format!(
                "normalization has {} / {} entries for {} features",
                n.shift.len(),
                n.scale.len(),
                self.len()
            )));
        }
        if n.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) || n.shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("normalization scales must be positive and finite".into()));
        }
        if n.shift[0] != 0.0 || n.scale[0] != 1.0 {
            return Err(Error::Config("the constant feature cannot be normalized".into()));
        }
        self.normalization = Some(n);
        Ok(())
    }

    pub fn clear_normalization(&mut self) {
        self.normalization = None;
    }

    /// Hex sha256 of the entry list; identifies raw design matrices.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.entries).expect("catalog entries serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Raw (unnormalized) feature values on one sub-grid.
    pub fn evaluate(&self, sub: &Subgrid) -> Result<Vec<f64>> {
        let cache = Analysis::new(sub);
        self.entries.iter().map(|e| evaluate_kind(&e.kind, sub, &cache)).collect()
    }
}

/// Lazily computed per-subgrid intermediates shared between features.
struct Analysis<'a> {
    sub: &'a Subgrid,
    blobs: [OnceCell<Vec<Blob>>; 2],
    conductivity: OnceCell<Vec<f64>>,
}

impl<'a> Analysis<'a> {
    fn new(sub: &'a Subgrid) -> Self {
        Analysis {
            sub,
            blobs: [OnceCell::new(), OnceCell::new()],
            conductivity: OnceCell::new(),
        }
    }

    fn mask(&self, phase: Phase) -> Vec<bool> {
        match phase {
            Phase::High => self.sub.high.clone(),
            Phase::Low => self.sub.high.iter().map(|h| !h).collect(),
        }
    }

    fn blobs(&self, phase: Phase) -> &[Blob] {
        let i = phase as usize;
        self.blobs[i].get_or_init(|| label_blobs(self.sub.nx, self.sub.ny, &self.mask(phase)))
    }

    fn conductivity(&self) -> &[f64] {
        self.conductivity.get_or_init(|| self.sub.conductivities())
    }
}

fn evaluate_kind(kind: &FeatureKind, sub: &Subgrid, a: &Analysis) -> Result<f64> {
    let (nx, ny) = (sub.nx, sub.ny);
    Ok(match *kind {
        FeatureKind::Constant => 1.0,
        FeatureKind::EffectiveMedium { formula, matrix } => {
            let phi_hi = sub.volume_fraction_hi();
            let (lh, ll) = (sub.lambda_hi, sub.lambda_lo);
            let high_matrix = match matrix {
                MatrixPhase::Low => false,
                MatrixPhase::High => true,
                MatrixPhase::Auto => phi_hi >= 0.5,
            };
            let (mat, inc, phi_inc) = if high_matrix { (lh, ll, 1.0 - phi_hi) } else { (ll, lh, phi_hi) };
            let f = match formula {
                Formula::Mga => mga,
                Formula::Sca => sca,
                Formula::Dem => dem,
            };
            f(mat, inc, phi_inc)?.ln()
        }
        FeatureKind::Morphological(m) => match m {
            Morphological::ConvexArea { phase, stat } => stat.apply(a.blobs(phase).iter().map(Blob::convex_area)),
            Morphological::Extent { phase, direction, stat } => stat.apply(a.blobs(phase).iter().map(|b| match direction {
                Direction::X => b.extent_x() as f64,
                Direction::Y => b.extent_y() as f64,
            })),
            Morphological::Distance { phase, metric, stat } => {
                match distance_transform(nx, ny, &a.mask(phase), metric) {
                    Some(d) => stat.apply(d),
                    None => 0.0,
                }
            }
            Morphological::PixelCross { phase, direction, stat } => {
                stat.apply(pixel_cross(nx, ny, &a.mask(phase), direction))
            }
            Morphological::PathMean { mean, direction, stat } => {
                stat.apply(path_means(nx, ny, a.conductivity(), direction, mean))
            }
        },
    })
}

fn dir_tag(d: Direction) -> &'static str {
    match d {
        Direction::X => "x",
        Direction::Y => "y",
    }
}

fn mean_tag(m: MeanType) -> &'static str {
    match m {
        MeanType::Harmonic => "harmonic",
        MeanType::Geometric => "geometric",
        MeanType::Arithmetic => "arithmetic",
    }
}

/// Conventional column name for a morphological descriptor.
pub fn morphological_name(m: &Morphological) -> String {
    match *m {
        Morphological::ConvexArea { phase, stat } => format!("convex_area_{}_{}", stat.name(), phase.tag()),
        Morphological::Extent { phase, direction, stat } => {
            format!("extent_{}_{}_{}", dir_tag(direction), stat.name(), phase.tag())
        }
        Morphological::Distance { phase, metric, stat } => {
            let suffix = match metric {
                DistanceMetric::Euclidean => "",
                DistanceMetric::Cityblock => "_cityblock",
                DistanceMetric::Chessboard => "_chessboard",
            };
            format!("dist_to_{}_{}{}", phase.tag(), stat.name(), suffix)
        }
        Morphological::PixelCross { phase, direction, stat } => {
            format!("pixel_cross_{}_{}_{}", dir_tag(direction), stat.name(), phase.tag())
        }
        Morphological::PathMean { mean, direction, stat } => {
            format!("log_{}_{}_{}", mean_tag(mean), dir_tag(direction), stat.name())
        }
    }
}

fn morph(m: Morphological) -> FeatureEntry {
    FeatureEntry::new(morphological_name(&m), FeatureKind::Morphological(m))
}

const PHASES: [Phase; 2] = [Phase::High, Phase::Low];
const DIRS: [Direction; 2] = [Direction::X, Direction::Y];

/// Every morphological descriptor family with its standard statistics (Euclidean distances).
pub fn morphological_entries() -> Vec<FeatureEntry> {
    use Statistic::*;
    let mut out = Vec::new();
    for phase in PHASES {
        for stat in [Max, Mean] {
            out.push(morph(Morphological::ConvexArea { phase, stat }));
        }
        for direction in DIRS {
            for stat in [Max, Mean] {
                out.push(morph(Morphological::Extent { phase, direction, stat }));
            }
        }
        for stat in [Mean, Max] {
            out.push(morph(Morphological::Distance {
                phase,
                metric: DistanceMetric::Euclidean,
                stat,
            }));
        }
        for direction in DIRS {
            for stat in [Mean, Max, Min] {
                out.push(morph(Morphological::PixelCross { phase, direction, stat }));
            }
        }
    }
    for mean in [MeanType::Harmonic, MeanType::Geometric, MeanType::Arithmetic] {
        for direction in DIRS {
            for stat in [Max, Mean] {
                out.push(morph(Morphological::PathMean { mean, direction, stat }));
            }
        }
    }
    out
}

/// The shipped 40-column catalog.
///
/// Statistics that are affine in the volume fraction (mean pixel-cross, mean log-geometric
/// path mean) are left out, and so are pixel-cross counts: the log-geometric mean of a line
/// is affine in its high-phase count. No column is an exact linear combination of others.
pub fn default_catalog() -> FeatureCatalog {
    use Statistic::*;
    let em = |name: &str, formula, matrix| FeatureEntry::new(name, FeatureKind::EffectiveMedium { formula, matrix });
    let mut entries = vec![
        FeatureEntry::new("constant", FeatureKind::Constant),
        em("log_sca", Formula::Sca, MatrixPhase::Auto),
        em("log_mga_lo_matrix", Formula::Mga, MatrixPhase::Low),
        em("log_mga_hi_matrix", Formula::Mga, MatrixPhase::High),
        em("log_dem_lo_matrix", Formula::Dem, MatrixPhase::Low),
        em("log_dem_hi_matrix", Formula::Dem, MatrixPhase::High),
    ];
    for phase in PHASES {
        for stat in [Max, Mean] {
            entries.push(morph(Morphological::ConvexArea { phase, stat }));
        }
    }
    for phase in PHASES {
        for direction in DIRS {
            for stat in [Max, Mean] {
                entries.push(morph(Morphological::Extent { phase, direction, stat }));
            }
        }
    }
    for phase in PHASES {
        for (metric, stats) in [
            (DistanceMetric::Euclidean, &[Mean, Max][..]),
            (DistanceMetric::Cityblock, &[Mean][..]),
        ] {
            for &stat in stats {
                entries.push(morph(Morphological::Distance { phase, metric, stat }));
            }
        }
    }
    for (mean, stats) in [
        (MeanType::Harmonic, &[Max, Mean, Min][..]),
        (MeanType::Geometric, &[Max, Min][..]),
        (MeanType::Arithmetic, &[Max, Mean, Min][..]),
    ] {
        for direction in DIRS {
            for &stat in stats {
                entries.push(morph(Morphological::PathMean { mean, direction, stat }));
            }
        }
    }
    FeatureCatalog::new(entries).expect("default catalog is valid")
}
