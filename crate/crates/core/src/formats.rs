//! On-disk formats. See `docs/formats.md` for the byte-level description.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::AttributeTable;
use crate::matrix::{BinaryMatrix, BinaryMatrixBuilder};
use crate::rbac::{FlatRbacConfig, HierRbacConfig, ModelKind};

pub const MATRIX_MAGIC: &str = "%rbac-matrix";
pub const CONFIG_FORMAT: &str = "rbac-config/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixLayout {
    Dense,
    Sparse,
}

fn content_lines(reader: impl BufRead) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader.lines().enumerate().map(|(n, l)| (n + 1, l))
}

/// Read a matrix file with a `%rbac-matrix` header.
pub fn read_matrix(reader: impl BufRead, source: &str) -> Result<BinaryMatrix> {
    let mut lines = content_lines(reader);
    let (line_no, header) = loop {
        match lines.next() {
            Some((n, l)) => {
                let l = l?;
                if !l.trim().is_empty() {
                    break (n, l);
                }
            }
            None => return Err(Error::parse(source, 0, "empty file")),
        }
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != MATRIX_MAGIC {
        return Err(Error::parse(source, line_no, format!("expected `{MATRIX_MAGIC} dense|sparse ROWS COLS`")));
    }
    let layout = match fields[1] {
        "dense" => MatrixLayout::Dense,
        "sparse" => MatrixLayout::Sparse,
        other => return Err(Error::parse(source, line_no, format!("unknown layout `{other}`"))),
    };
    let parse_dim = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::parse(source, line_no, format!("invalid dimension `{s}`")))
    };
    let rows = parse_dim(fields[2])?;
    let cols = parse_dim(fields[3])?;
    let mut b = BinaryMatrixBuilder::new(rows, cols)?;
    match layout {
        MatrixLayout::Dense => {
            let mut r = 0;
            for (n, l) in lines {
                let l = l?;
                let l = l.trim_end_matches('\r');
                if l.is_empty() {
                    continue;
                }
                if r == rows {
                    return Err(Error::parse(source, n, format!("more than {rows} rows")));
                }
                if l.len() != cols {
                    return Err(Error::parse(source, n, format!("row has {} entries, expected {cols}", l.len())));
                }
                for (c, ch) in l.bytes().enumerate() {
                    match ch {
                        b'0' => {}
                        b'1' => b.set(r, c, true),
                        _ => return Err(Error::parse(source, n, format!("column {}: expected 0 or 1", c + 1))),
                    }
                }
                r += 1;
            }
            if r != rows {
                return Err(Error::parse(source, 0, format!("found {r} rows, header says {rows}")));
            }
        }
        MatrixLayout::Sparse => {
            for (n, l) in lines {
                let l = l?;
                let l = l.trim();
                if l.is_empty() {
                    continue;
                }
                let (i, d) = parse_pair(l).ok_or_else(|| Error::parse(source, n, "expected `ROW COL`"))?;
                if i == 0 || d == 0 || i > rows || d > cols {
                    return Err(Error::parse(source, n, format!("index ({i}, {d}) outside 1..={rows} x 1..={cols}")));
                }
                if b.get(i - 1, d - 1) {
                    return Err(Error::parse(source, n, format!("duplicate entry ({i}, {d})")));
                }
                b.set(i - 1, d - 1, true);
            }
        }
    }
    Ok(b.build())
}

fn parse_pair(l: &str) -> Option<(usize, usize)> {
    let mut it = l.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
    let a = it.next()?.parse().ok()?;
    let b = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((a, b))
}

/// Header-less list of `user permission` id pairs (whitespace or comma
/// separated). Ids are arbitrary integers; users and permissions are numbered
/// by ascending id. Duplicate pairs are ignored.
pub fn read_pairs(reader: impl BufRead, source: &str) -> Result<(BinaryMatrix, Vec<u64>, Vec<u64>)> {
    let mut pairs = Vec::new();
    for (n, l) in content_lines(reader) {
        let l = l?;
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut it = l.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
        let parsed = (|| -> Option<(u64, u64)> {
            let a = it.next()?.parse().ok()?;
            let b = it.next()?.parse().ok()?;
            it.next().is_none().then_some((a, b))
        })();
        pairs.push(parsed.ok_or_else(|| Error::parse(source, n, "expected `USER PERMISSION`"))?);
    }
    let users: Vec<u64> = pairs.iter().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect();
    let perms: Vec<u64> = pairs.iter().map(|p| p.1).collect::<BTreeSet<_>>().into_iter().collect();
    let ui: HashMap<u64, usize> = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let pi: HashMap<u64, usize> = perms.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let mut b = BinaryMatrixBuilder::new(users.len(), perms.len())?;
    for (u, p) in pairs {
        b.set(ui[&u], pi[&p], true);
    }
    Ok((b.build(), users, perms))
}

/// Read a matrix file, falling back to a pair list when there is no header.
pub fn load_matrix(path: &std::path::Path) -> Result<BinaryMatrix> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.trim_start().starts_with(MATRIX_MAGIC) {
        read_matrix(text.as_bytes(), &name)
    } else {
        read_pairs(text.as_bytes(), &name).map(|(m, _, _)| m)
    }
}

pub fn write_matrix(mut w: impl Write, m: &BinaryMatrix, layout: MatrixLayout) -> Result<()> {
    match layout {
        MatrixLayout::Dense => {
            writeln!(w, "{MATRIX_MAGIC} dense {} {}", m.rows(), m.cols())?;
            for i in 0..m.rows() {
                writeln!(w, "{}", bits_to_string(m, i))?;
            }
        }
        MatrixLayout::Sparse => {
            writeln!(w, "{MATRIX_MAGIC} sparse {} {}", m.rows(), m.cols())?;
            for i in 0..m.rows() {
                for d in m.row_ones(i) {
                    writeln!(w, "{} {}", i + 1, d + 1)?;
                }
            }
        }
    }
    Ok(())
}

pub fn save_matrix(path: &std::path::Path, m: &BinaryMatrix, layout: MatrixLayout) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, m, layout)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn bits_to_string(m: &BinaryMatrix, i: usize) -> String {
    (0..m.cols()).map(|d| if m.get(i, d) { '1' } else { '0' }).collect()
}

fn matrix_to_strings(m: &BinaryMatrix) -> Vec<String> {
    (0..m.rows()).map(|i| bits_to_string(m, i)).collect()
}

fn strings_to_matrix(rows: &[String], what: &str) -> Result<BinaryMatrix> {
    let bytes: Vec<Vec<u8>> = rows
        .iter()
        .enumerate()
        .map(|(r, s)| {
            s.bytes()
                .enumerate()
                .map(|(c, ch)| match ch {
                    b'0' => Ok(0),
                    b'1' => Ok(1),
                    _ => Err(Error::InvalidConfig(format!("{what} row {}: column {} is not 0 or 1", r + 1, c + 1))),
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    BinaryMatrix::from_rows(&bytes)
}

/// `user,kind,value` rows with 1-based users; an optional header line starting
/// with `user` is skipped. Returns one table per kind in order of appearance.
pub fn read_attributes(reader: impl BufRead, source: &str, users: usize) -> Result<Vec<AttributeTable>> {
    let mut kinds: Vec<String> = Vec::new();
    let mut cells: Vec<Vec<Option<String>>> = Vec::new();
    for (n, l) in content_lines(reader) {
        let l = l?;
        let l = l.trim();
        if l.is_empty() || (n == 1 && l.to_ascii_lowercase().starts_with("user")) {
            continue;
        }
        let parts: Vec<&str> = l.splitn(3, ',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::parse(source, n, "expected `user,kind,value`"));
        }
        let user: usize = parts[0]
            .parse()
            .map_err(|_| Error::parse(source, n, format!("invalid user index `{}`", parts[0])))?;
        if user == 0 || user > users {
            return Err(Error::parse(source, n, format!("user {user} outside 1..={users}")));
        }
        let kind_idx = match kinds.iter().position(|k| k == parts[1]) {
            Some(k) => k,
            None => {
                kinds.push(parts[1].to_string());
                cells.push(vec![None; users]);
                kinds.len() - 1
            }
        };
        let slot = &mut cells[kind_idx][user - 1];
        if slot.is_some() {
            return Err(Error::parse(source, n, format!("user {user} has two values for `{}`", parts[1])));
        }
        *slot = Some(parts[2].to_string());
    }
    if kinds.is_empty() {
        return Err(Error::parse(source, 0, "no attribute rows"));
    }
    kinds
        .into_iter()
        .zip(cells)
        .map(|(kind, values)| {
            if let Some(missing) = values.iter().position(Option::is_none) {
                return Err(Error::InvalidConfig(format!("user {} has no value for attribute `{kind}`", missing + 1)));
            }
            let labels: Vec<String> = values.into_iter().map(Option::unwrap).collect();
            AttributeTable::from_labels(kind, &labels)
        })
        .collect()
}

pub fn write_attributes(mut w: impl Write, tables: &[AttributeTable]) -> Result<()> {
    writeln!(w, "user,kind,value")?;
    for t in tables {
        for i in 0..t.num_users() {
            writeln!(w, "{},{},{}", i + 1, t.kind(), t.labels()[t.value(i)])?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParameters {
    Mac {
        /// Row-major K x D absence probabilities.
        beta: Vec<Vec<f64>>,
        eps: f64,
        r: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda: Option<f64>,
    },
    Ddm {
        alpha: f64,
        beta_prior_strength: f64,
    },
    None,
}

/// A fitted or ground-truth configuration with its parameters and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbacConfigFile {
    pub format: String,
    pub model: ModelKind,
    pub users: usize,
    pub permissions: usize,
    /// User-role rows (`Z`).
    pub assignments: Vec<String>,
    /// Role-permission rows (`U`) for flat models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<Vec<String>>,
    /// Business-to-technical rows (`V`) for two-level models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_hierarchy: Option<Vec<String>>,
    /// Technical role-permission rows (`Y`) for two-level models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub technical_roles: Option<Vec<String>>,
    pub parameters: ModelParameters,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_file: Option<String>,
}

impl RbacConfigFile {
    pub fn from_flat(model: ModelKind, config: &FlatRbacConfig, parameters: ModelParameters) -> Self {
        Self {
            format: CONFIG_FORMAT.into(),
            model,
            users: config.z().rows(),
            permissions: config.u().cols(),
            assignments: matrix_to_strings(config.z()),
            roles: Some(matrix_to_strings(config.u())),
            role_hierarchy: None,
            technical_roles: None,
            parameters,
            diagnostics: BTreeMap::new(),
            confidence_file: None,
        }
    }

    pub fn from_hier(model: ModelKind, config: &HierRbacConfig, parameters: ModelParameters) -> Self {
        Self {
            format: CONFIG_FORMAT.into(),
            model,
            users: config.z().rows(),
            permissions: config.y().cols(),
            assignments: matrix_to_strings(config.z()),
            roles: None,
            role_hierarchy: Some(matrix_to_strings(config.v())),
            technical_roles: Some(matrix_to_strings(config.y())),
            parameters,
            diagnostics: BTreeMap::new(),
            confidence_file: None,
        }
    }

    pub fn z(&self) -> Result<BinaryMatrix> {
        strings_to_matrix(&self.assignments, "assignments")
    }

    /// The configuration as `(Z, U)`; two-level files are collapsed.
    pub fn to_flat(&self) -> Result<FlatRbacConfig> {
        match (&self.roles, &self.role_hierarchy, &self.technical_roles) {
            (Some(u), _, _) => FlatRbacConfig::new(self.z()?, strings_to_matrix(u, "roles")?),
            (None, Some(_), Some(_)) => Ok(self.to_hier()?.flatten()),
            _ => Err(Error::InvalidConfig("configuration has neither roles nor a role hierarchy".into())),
        }
    }

    pub fn to_hier(&self) -> Result<HierRbacConfig> {
        match (&self.role_hierarchy, &self.technical_roles) {
            (Some(v), Some(y)) => HierRbacConfig::new(
                self.z()?,
                strings_to_matrix(v, "role_hierarchy")?,
                strings_to_matrix(y, "technical_roles")?,
            ),
            _ => Err(Error::InvalidConfig("configuration is not two-level".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT {
            return Err(Error::InvalidConfig(format!("unsupported format `{}`", self.format)));
        }
        let flat = self.to_flat()?;
        if flat.z().rows() != self.users || flat.u().cols() != self.permissions {
            return Err(Error::InvalidConfig("declared dimensions do not match the matrices".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// Per-cell confidence as CSV `user,permission,reconstructed,confidence`
/// with 1-based indices.
pub fn write_confidence(mut w: impl Write, reconstruction: &BinaryMatrix, confidences: &[f64]) -> Result<()> {
    let (n, d) = reconstruction.shape();
    if confidences.len() != n * d {
        return Err(Error::ShapeMismatch {
            op: "write_confidence",
            left: (n, d),
            right: (confidences.len(), 1),
        });
    }
    writeln!(w, "user,permission,reconstructed,confidence")?;
    for i in 0..n {
        for j in 0..d {
            writeln!(w, "{},{},{},{}", i + 1, j + 1, reconstruction.get(i, j) as u8, confidences[i * d + j])?;
        }
    }
    Ok(())
}
