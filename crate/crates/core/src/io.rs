//! Text artifacts exchanged between pipeline stages: CSV tables, split files,
//! id mappings and flat `key=value` configuration files.
//!
//! Every table except the ingested interactions file addresses users and
//! items by dense 0-based index. External ids live only in the mapping file.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use crate::causal::MeanEstimate;
use crate::data::{GroundTruthPanel, InteractionDataset, SplitDraw};
use crate::error::{Error, Result};
use crate::estimate::PropensityEstimate;
use crate::eval::{BinRatio, Rankings};
use crate::pipeline::StudyRow;
use crate::propcare::EpochLog;

pub const PANEL_HEADER: &str = "user_id,item_id,p,z,y1,y0";
pub const INTERACTIONS_HEADER: &str = "user_id,item_id,y";
pub const SPLIT_HEADER: &str = "draw,user_id,item_id,z,y";
pub const SPLIT_MAGIC: &str = "# propcare-split";
pub const ESTIMATES_HEADER: &str = "user_id,item_id,p_hat,p_scaled,z_hat";
pub const RANKINGS_HEADER: &str = "user_id,rank,item_id,score";
pub const BINS_HEADER: &str = "bin_low,bin_high,ratio,pair_count";
pub const STUDY_HEADER: &str = "noise_level,metric,value,stderr";
pub const MAPPING_HEADER: &str = "kind,index,id";
pub const HISTORY_HEADER: &str = "epoch,train_loss,naive,pairwise,kl,valid_loss,eta";
pub const RANKER_HISTORY_HEADER: &str = "epoch,train_loss,valid_loss";

/// Rows of a CSV body with their 1-based line numbers in the source.
struct Table {
    rows: Vec<(usize, csv::StringRecord)>,
}

fn read_table(reader: impl Read, header: &str, first_line: usize) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let expected: Vec<&str> = header.split(',').collect();
    let head = match records.next() {
        Some(rec) => rec.map_err(|e| shift(e.into(), first_line))?,
        None => return Err(Error::parse(first_line, format!("missing header `{header}`"))),
    };
    if head.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            first_line,
            format!("expected header `{header}`, found `{}`", head.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| shift(e.into(), first_line))?;
        let line = rec.position().map_or(0, |p| p.line() as usize) + first_line - 1;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != expected.len() {
            return Err(Error::parse(
                line,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        rows.push((line, rec));
    }
    Ok(Table { rows })
}

fn shift(err: Error, first_line: usize) -> Error {
    match err {
        Error::Parse { line, msg } => Error::Parse {
            line: line + first_line - 1,
            msg,
        },
        other => other,
    }
}

fn field<T: FromStr>(rec: &csv::StringRecord, k: usize, name: &str, line: usize) -> Result<T> {
    rec[k]
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid {name} `{}`", &rec[k])))
}

fn flag(rec: &csv::StringRecord, k: usize, name: &str, line: usize) -> Result<bool> {
    match &rec[k] {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::parse(line, format!("{name} must be 0 or 1, got `{other}`"))),
    }
}

fn probability(rec: &csv::StringRecord, k: usize, name: &str, line: usize) -> Result<f64> {
    let v: f64 = field(rec, k, name, line)?;
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::parse(line, format!("{name} {v} outside (0, 1)")));
    }
    Ok(v)
}

/// Tracks which pairs of a `U × I` grid a table has covered.
struct Coverage {
    num_users: usize,
    num_items: usize,
    seen: Vec<bool>,
    what: &'static str,
}

impl Coverage {
    fn new(num_users: usize, num_items: usize, what: &'static str) -> Self {
        Self {
            num_users,
            num_items,
            seen: vec![false; num_users * num_items],
            what,
        }
    }

    fn mark(&mut self, user: usize, item: usize, line: usize) -> Result<usize> {
        if user >= self.num_users || item >= self.num_items {
            return Err(Error::Misaligned(format!(
                "{} pair (user {user}, item {item}) on line {line} lies outside {}x{}",
                self.what, self.num_users, self.num_items
            )));
        }
        let k = user * self.num_items + item;
        if self.seen[k] {
            return Err(Error::parse(line, format!("duplicate pair (user {user}, item {item})")));
        }
        self.seen[k] = true;
        Ok(k)
    }

    fn finish(&self) -> Result<()> {
        match self.seen.iter().position(|&s| !s) {
            Some(k) => Err(Error::Misaligned(format!(
                "{} lacks pair (user {}, item {})",
                self.what,
                k / self.num_items,
                k % self.num_items
            ))),
            None => Ok(()),
        }
    }
}

/// Grid dimensions implied by the largest indices in the first two columns.
fn grid_dims(table: &Table, user_col: usize, item_col: usize) -> Result<(usize, usize)> {
    let (mut nu, mut ni) = (0usize, 0usize);
    for (line, rec) in &table.rows {
        nu = nu.max(field::<usize>(rec, user_col, "user_id", *line)? + 1);
        ni = ni.max(field::<usize>(rec, item_col, "item_id", *line)? + 1);
    }
    if nu == 0 {
        return Err(Error::Input("table has no rows".into()));
    }
    if nu.checked_mul(ni) != Some(table.rows.len()) {
        return Err(Error::Input(format!(
            "{} rows cannot cover a {nu}x{ni} grid exactly once",
            table.rows.len()
        )));
    }
    Ok((nu, ni))
}

pub fn write_panel(mut w: impl Write, panel: &GroundTruthPanel) -> Result<()> {
    writeln!(w, "{PANEL_HEADER}")?;
    let ni = panel.num_items();
    for k in 0..panel.num_pairs() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            k / ni,
            k % ni,
            panel.p()[k],
            u8::from(panel.z()[k]),
            u8::from(panel.y1()[k]),
            u8::from(panel.y0()[k])
        )?;
    }
    Ok(())
}

/// Rows may come in any order but must cover the `U × I` grid exactly once,
/// where `U` and `I` are one past the largest indices seen.
pub fn read_panel(reader: impl Read) -> Result<GroundTruthPanel> {
    let table = read_table(reader, PANEL_HEADER, 1)?;
    let (nu, ni) = grid_dims(&table, 0, 1)?;
    let n = nu * ni;
    let mut cov = Coverage::new(nu, ni, "panel");
    let (mut p, mut z, mut y1, mut y0) = (vec![0.0; n], vec![false; n], vec![false; n], vec![false; n]);
    for (line, rec) in &table.rows {
        let line = *line;
        let k = cov.mark(field(rec, 0, "user_id", line)?, field(rec, 1, "item_id", line)?, line)?;
        p[k] = probability(rec, 2, "p", line)?;
        z[k] = flag(rec, 3, "z", line)?;
        y1[k] = flag(rec, 4, "y1", line)?;
        y0[k] = flag(rec, 5, "y0", line)?;
    }
    cov.finish()?;
    GroundTruthPanel::new(nu, ni, p, z, y1, y0)
}

/// Dense index ↔ external id tables for users and items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMapping {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IdMapping {
    /// Index `k` maps to the id `k`.
    pub fn identity(num_users: usize, num_items: usize) -> Self {
        Self {
            users: (0..num_users).map(|k| k.to_string()).collect(),
            items: (0..num_items).map(|k| k.to_string()).collect(),
        }
    }
}

/// Numeric order when every id is an unsigned integer, lexicographic
/// otherwise.
fn order_ids(ids: BTreeSet<String>) -> Vec<String> {
    let mut ids: Vec<String> = ids.into_iter().collect();
    if ids.iter().all(|s| s.parse::<u64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<u64>().unwrap_or_default());
    }
    ids
}

pub fn write_mapping(mut w: impl Write, mapping: &IdMapping) -> Result<()> {
    writeln!(w, "{MAPPING_HEADER}")?;
    for (k, id) in mapping.users.iter().enumerate() {
        writeln!(w, "user,{k},{id}")?;
    }
    for (k, id) in mapping.items.iter().enumerate() {
        writeln!(w, "item,{k},{id}")?;
    }
    Ok(())
}

pub fn read_mapping(reader: impl Read) -> Result<IdMapping> {
    let table = read_table(reader, MAPPING_HEADER, 1)?;
    let mut out = IdMapping {
        users: Vec::new(),
        items: Vec::new(),
    };
    for (line, rec) in &table.rows {
        let index: usize = field(rec, 1, "index", *line)?;
        let list = match &rec[0] {
            "user" => &mut out.users,
            "item" => &mut out.items,
            other => return Err(Error::parse(*line, format!("unknown kind `{other}`"))),
        };
        if index != list.len() {
            return Err(Error::parse(*line, format!("expected index {}, got {index}", list.len())));
        }
        list.push(rec[2].to_string());
    }
    Ok(out)
}

/// An externally supplied interaction table after id remapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub data: InteractionDataset,
    pub mapping: IdMapping,
}

/// Load `user_id,item_id,y` rows. Every id seen, with `y = 0` or `1`,
/// receives a dense index; rows with `y = 1` become positives.
pub fn read_interactions(reader: impl Read) -> Result<Ingested> {
    let table = read_table(reader, INTERACTIONS_HEADER, 1)?;
    if table.rows.is_empty() {
        return Err(Error::Input("interaction file has no rows (U = 0)".into()));
    }
    let mut pairs = HashSet::with_capacity(table.rows.len());
    let (mut users, mut items) = (BTreeSet::new(), BTreeSet::new());
    for (line, rec) in &table.rows {
        let (u, i) = (&rec[0], &rec[1]);
        if u.is_empty() || i.is_empty() {
            return Err(Error::parse(*line, "empty id"));
        }
        flag(rec, 2, "y", *line)?;
        if !pairs.insert((u.to_string(), i.to_string())) {
            return Err(Error::parse(*line, format!("duplicate pair (user {u}, item {i})")));
        }
        users.insert(u.to_string());
        items.insert(i.to_string());
    }
    let mapping = IdMapping {
        users: order_ids(users),
        items: order_ids(items),
    };
    let user_index: HashMap<&str, u32> =
        mapping.users.iter().enumerate().map(|(k, s)| (s.as_str(), k as u32)).collect();
    let item_index: HashMap<&str, u32> =
        mapping.items.iter().enumerate().map(|(k, s)| (s.as_str(), k as u32)).collect();
    let positives = table
        .rows
        .iter()
        .filter(|(_, rec)| &rec[2] == "1")
        .map(|(_, rec)| (user_index[&rec[0]], item_index[&rec[1]]))
        .collect();
    let data = InteractionDataset::new(mapping.users.len(), mapping.items.len(), positives)?;
    Ok(Ingested { data, mapping })
}

/// Write the positives, plus one `y = 0` row for every user or item without
/// any, so that reading the file back restores the same index space.
pub fn write_interactions(mut w: impl Write, data: &InteractionDataset, mapping: &IdMapping) -> Result<()> {
    if mapping.users.len() != data.num_users() || mapping.items.len() != data.num_items() {
        return Err(Error::Shape("mapping does not match the dataset".into()));
    }
    writeln!(w, "{INTERACTIONS_HEADER}")?;
    for &(u, i) in data.positives() {
        writeln!(w, "{},{},1", mapping.users[u as usize], mapping.items[i as usize])?;
    }
    let counts = data.item_counts();
    for u in (0..data.num_users()).filter(|&u| data.user_positives(u).is_empty()) {
        writeln!(w, "{},{},0", mapping.users[u], mapping.items[0])?;
    }
    for i in (0..data.num_items()).filter(|&i| counts[i] == 0) {
        if i == 0 && data.user_positives(0).is_empty() {
            continue;
        }
        writeln!(w, "{},{},0", mapping.users[0], mapping.items[i])?;
    }
    Ok(())
}

/// Write exposure draws sparsely: only pairs with `z = 1` or `y = 1`.
pub fn write_split(mut w: impl Write, draws: &[SplitDraw]) -> Result<()> {
    let first = draws
        .first()
        .ok_or_else(|| Error::Input("split has no draws".into()))?;
    let (nu, ni) = (first.data.num_users(), first.data.num_items());
    writeln!(w, "{SPLIT_MAGIC} num_users={nu} num_items={ni} draws={}", draws.len())?;
    writeln!(w, "{SPLIT_HEADER}")?;
    for (d, draw) in draws.iter().enumerate() {
        if draw.data.num_users() != nu || draw.data.num_items() != ni || draw.z.len() != nu * ni {
            return Err(Error::Shape(format!("draw {d} differs in shape")));
        }
        for (k, (&z, &y)) in draw.z.iter().zip(draw.data.dense()).enumerate() {
            if z || y {
                writeln!(w, "{d},{},{},{},{}", k / ni, k % ni, u8::from(z), u8::from(y))?;
            }
        }
    }
    Ok(())
}

fn parse_split_magic(line: &str) -> Result<(usize, usize, usize)> {
    let rest = line
        .trim_end()
        .strip_prefix(SPLIT_MAGIC)
        .ok_or_else(|| Error::parse(1, format!("expected `{SPLIT_MAGIC}` header")))?;
    let mut dims: [Option<usize>; 3] = [None; 3];
    for part in rest.split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("malformed header entry `{part}`")))?;
        let slot = match key {
            "num_users" => 0,
            "num_items" => 1,
            "draws" => 2,
            _ => return Err(Error::parse(1, format!("unknown header key `{key}`"))),
        };
        dims[slot] = Some(
            value
                .parse()
                .map_err(|_| Error::parse(1, format!("invalid {key} `{value}`")))?,
        );
    }
    match dims {
        [Some(nu), Some(ni), Some(k)] if nu > 0 && ni > 0 && k > 0 => {
            nu.checked_mul(ni)
                .and_then(|n| n.checked_mul(k))
                .filter(|&n| n <= 1 << 27)
                .ok_or_else(|| Error::parse(1, "split dimensions too large"))?;
            Ok((nu, ni, k))
        }
        _ => Err(Error::parse(1, "header needs positive num_users, num_items and draws")),
    }
}

pub fn read_split(reader: impl Read) -> Result<Vec<SplitDraw>> {
    let mut reader = BufReader::new(reader);
    let mut magic = String::new();
    reader.read_line(&mut magic)?;
    let (nu, ni, draws) = parse_split_magic(&magic)?;
    let table = read_table(reader, SPLIT_HEADER, 2)?;
    let n = nu * ni;
    let mut z = vec![vec![false; n]; draws];
    let mut y = vec![vec![false; n]; draws];
    let mut seen = HashSet::new();
    for (line, rec) in &table.rows {
        let line = *line;
        let d: usize = field(rec, 0, "draw", line)?;
        let (u, i): (usize, usize) = (field(rec, 1, "user_id", line)?, field(rec, 2, "item_id", line)?);
        if d >= draws || u >= nu || i >= ni {
            return Err(Error::parse(
                line,
                format!("row (draw {d}, user {u}, item {i}) outside {draws} x {nu}x{ni}"),
            ));
        }
        if !seen.insert((d, u, i)) {
            return Err(Error::parse(line, format!("duplicate row (draw {d}, user {u}, item {i})")));
        }
        z[d][u * ni + i] = flag(rec, 3, "z", line)?;
        y[d][u * ni + i] = flag(rec, 4, "y", line)?;
    }
    z.into_iter()
        .zip(y)
        .map(|(z, y)| SplitDraw::from_outcomes(nu, ni, z, y))
        .collect()
}

/// Read either a split file or an interactions table, recognized by the
/// first line. Interaction tables yield one draw without exposure labels,
/// together with their id mapping.
pub fn read_training_data(mut reader: impl Read) -> Result<(Vec<SplitDraw>, Option<IdMapping>)> {
    let mut text = Vec::new();
    reader.read_to_end(&mut text)?;
    if text.starts_with(SPLIT_MAGIC.as_bytes()) {
        Ok((read_split(text.as_slice())?, None))
    } else {
        let ingested = read_interactions(text.as_slice())?;
        let n = ingested.data.num_pairs();
        let draw = SplitDraw {
            z: vec![false; n],
            data: ingested.data,
        };
        Ok((vec![draw], Some(ingested.mapping)))
    }
}

pub fn write_estimates(mut w: impl Write, estimate: &PropensityEstimate) -> Result<()> {
    writeln!(w, "{ESTIMATES_HEADER}")?;
    let ni = estimate.num_items();
    for k in 0..estimate.num_pairs() {
        writeln!(
            w,
            "{},{},{},{},{}",
            k / ni,
            k % ni,
            estimate.p_hat[k],
            estimate.p_scaled[k],
            u8::from(estimate.z_hat[k])
        )?;
    }
    Ok(())
}

/// Read estimates that must cover exactly the `num_users × num_items` grid.
pub fn read_estimates(reader: impl Read, num_users: usize, num_items: usize) -> Result<PropensityEstimate> {
    let table = read_table(reader, ESTIMATES_HEADER, 1)?;
    let n = num_users * num_items;
    let mut cov = Coverage::new(num_users, num_items, "estimates");
    let (mut p_hat, mut p_scaled, mut z_hat) = (vec![0.0; n], vec![0.0; n], vec![false; n]);
    for (line, rec) in &table.rows {
        let line = *line;
        let k = cov.mark(field(rec, 0, "user_id", line)?, field(rec, 1, "item_id", line)?, line)?;
        p_hat[k] = probability(rec, 2, "p_hat", line)?;
        p_scaled[k] = probability(rec, 3, "p_scaled", line)?;
        z_hat[k] = flag(rec, 4, "z_hat", line)?;
    }
    cov.finish()?;
    PropensityEstimate::new(num_users, num_items, p_hat, p_scaled, z_hat)
}

/// Read estimates whose grid is implied by the indices in the file.
pub fn read_estimates_any(mut reader: impl Read) -> Result<PropensityEstimate> {
    let mut text = Vec::new();
    reader.read_to_end(&mut text)?;
    let table = read_table(text.as_slice(), ESTIMATES_HEADER, 1)?;
    let (nu, ni) = grid_dims(&table, 0, 1)?;
    read_estimates(text.as_slice(), nu, ni)
}

/// One row per user and rank; `scores[u][r]` is the score of the item ranked
/// `r + 1` for user `u`.
pub fn write_rankings(mut w: impl Write, rankings: &Rankings, scores: &[Vec<f64>]) -> Result<()> {
    if scores.len() != rankings.num_users() {
        return Err(Error::Shape("one score list per user required".into()));
    }
    writeln!(w, "{RANKINGS_HEADER}")?;
    for (u, order) in rankings.orders().iter().enumerate() {
        for (r, &i) in order.iter().enumerate() {
            writeln!(w, "{u},{},{i},{}", r + 1, scores[u][i as usize])?;
        }
    }
    Ok(())
}

/// Read rankings for `num_users` users, each a full permutation of
/// `num_items` items listed under ranks `1..=num_items`.
pub fn read_rankings(reader: impl Read, num_users: usize, num_items: usize) -> Result<Rankings> {
    let table = read_table(reader, RANKINGS_HEADER, 1)?;
    let mut orders = vec![vec![u32::MAX; num_items]; num_users];
    let mut cov = Coverage::new(num_users, num_items, "rankings");
    for (line, rec) in &table.rows {
        let line = *line;
        let u: usize = field(rec, 0, "user_id", line)?;
        let rank: usize = field(rec, 1, "rank", line)?;
        let i: usize = field(rec, 2, "item_id", line)?;
        let score: f64 = field(rec, 3, "score", line)?;
        if score.is_nan() {
            return Err(Error::parse(line, "score is NaN"));
        }
        cov.mark(u, i, line)?;
        if rank == 0 || rank > num_items {
            return Err(Error::parse(line, format!("rank {rank} outside 1..={num_items}")));
        }
        if orders[u][rank - 1] != u32::MAX {
            return Err(Error::parse(line, format!("user {u} repeats rank {rank}")));
        }
        orders[u][rank - 1] = i as u32;
    }
    cov.finish()?;
    Rankings::new(num_items, orders)
}

pub fn write_bins(mut w: impl Write, bins: &[BinRatio]) -> Result<()> {
    writeln!(w, "{BINS_HEADER}")?;
    for b in bins {
        let ratio = b.ratio.map(|r| r.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{ratio},{}", b.bin_low, b.bin_high, b.pair_count)?;
    }
    Ok(())
}

pub fn read_bins(reader: impl Read) -> Result<Vec<BinRatio>> {
    let table = read_table(reader, BINS_HEADER, 1)?;
    table
        .rows
        .iter()
        .map(|(line, rec)| {
            Ok(BinRatio {
                bin_low: field(rec, 0, "bin_low", *line)?,
                bin_high: field(rec, 1, "bin_high", *line)?,
                ratio: if rec[2].is_empty() {
                    None
                } else {
                    Some(field(rec, 2, "ratio", *line)?)
                },
                pair_count: field(rec, 3, "pair_count", *line)?,
            })
        })
        .collect()
}

pub fn write_study(mut w: impl Write, rows: &[StudyRow]) -> Result<()> {
    writeln!(w, "{STUDY_HEADER}")?;
    for r in rows {
        if r.metric.contains([',', '"', '\n']) {
            return Err(Error::Input(format!("metric name `{}` needs quoting", r.metric)));
        }
        writeln!(w, "{},{},{},{}", r.noise_level, r.metric, r.value, r.stderr)?;
    }
    Ok(())
}

pub fn read_study(reader: impl Read) -> Result<Vec<StudyRow>> {
    let table = read_table(reader, STUDY_HEADER, 1)?;
    table
        .rows
        .iter()
        .map(|(line, rec)| {
            Ok(StudyRow {
                noise_level: field(rec, 0, "noise_level", *line)?,
                metric: rec[1].to_string(),
                value: field(rec, 2, "value", *line)?,
                stderr: field(rec, 3, "stderr", *line)?,
            })
        })
        .collect()
}

pub fn write_history(mut w: impl Write, history: &[EpochLog]) -> Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for h in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            h.epoch, h.train_loss, h.naive, h.pairwise, h.kl, h.valid_loss, h.eta
        )?;
    }
    Ok(())
}

pub fn write_ranker_history(mut w: impl Write, history: &[(usize, f64, f64)]) -> Result<()> {
    writeln!(w, "{RANKER_HISTORY_HEADER}")?;
    for (epoch, train, valid) in history {
        writeln!(w, "{epoch},{train},{valid}")?;
    }
    Ok(())
}

/// Summary row of a Monte-Carlo estimate, for study tables.
pub fn study_row(noise_level: f64, metric: &str, estimate: MeanEstimate) -> StudyRow {
    StudyRow {
        noise_level,
        metric: metric.to_string(),
        value: estimate.mean,
        stderr: estimate.stderr,
    }
}

/// One `key=value` assignment and the line it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parse a flat configuration file. `#` starts a comment, blank lines are
/// ignored, keys are `[A-Za-z0-9_.-]+` and may appear only once.
pub fn parse_settings(text: &str) -> Result<Vec<Setting>> {
    let mut out: Vec<Setting> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split_once('#').map_or(raw, |(c, _)| c).trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::parse(line, format!("expected key=value, found `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty()
            || !key
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
        {
            return Err(Error::parse(line, format!("invalid key `{key}`")));
        }
        if value.is_empty() {
            return Err(Error::parse(line, format!("key `{key}` has no value")));
        }
        if let Some(prev) = out.iter().find(|s| s.key == key) {
            return Err(Error::parse(
                line,
                format!("key `{key}` already set on line {}", prev.line),
            ));
        }
        out.push(Setting {
            key: key.to_string(),
            value: value.to_string(),
            line,
        });
    }
    Ok(out)
}

impl Setting {
    pub fn parse<T: FromStr>(&self) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| Error::parse(self.line, format!("invalid value `{}` for `{}`", self.value, self.key)))
    }

    /// `true`/`false`, `1`/`0`, `yes`/`no`.
    pub fn parse_bool(&self) -> Result<bool> {
        match self.value.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(Error::parse(
                self.line,
                format!("`{}` expects a boolean, got `{}`", self.key, self.value),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interactions_example() {
        let text = "user_id,item_id,y\n0,0,1\n0,1,0\n1,0,1\n";
        let ing = read_interactions(text.as_bytes()).unwrap();
        assert_eq!((ing.data.num_users(), ing.data.num_items()), (2, 2));
        assert_eq!(ing.data.positives(), &[(0, 0), (1, 0)]);
    }

    #[test]
    fn interactions_errors() {
        assert!(matches!(
            read_interactions("user_id,item_id,y\n".as_bytes()),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            read_interactions("user_id,item_id,y\n0,0,1\n0,0,0\n".as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            read_interactions("user_id,item_id,y\n0,0,2\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_interactions("user_id,item_id,y\n0,0\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_interactions("user,item,y\n0,0,1\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn numeric_ids_sort_numerically() {
        let text = "user_id,item_id,y\n10,b,1\n9,a,1\n";
        let ing = read_interactions(text.as_bytes()).unwrap();
        assert_eq!(ing.mapping.users, vec!["9", "10"]);
        assert_eq!(ing.mapping.items, vec!["a", "b"]);
        assert_eq!(ing.data.positives(), &[(0, 0), (1, 1)]);
    }

    #[test]
    fn settings_parse() {
        let s = parse_settings("# c\nnum_users = 5 # trailing\n\nseed=3\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].parse::<usize>().unwrap(), 5);
        assert_eq!(s[1].line, 4);
        assert!(matches!(parse_settings("a=1\na=2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_settings("novalue"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_settings("bad key=1"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_header_errors() {
        assert!(read_split("draw,user_id\n".as_bytes()).is_err());
        assert!(read_split("# propcare-split num_users=0 num_items=1 draws=1\n".as_bytes()).is_err());
        let ok = "# propcare-split num_users=1 num_items=2 draws=1\ndraw,user_id,item_id,z,y\n0,0,1,1,1\n";
        let d = read_split(ok.as_bytes()).unwrap();
        assert_eq!(d[0].z, vec![false, true]);
        let bad = "# propcare-split num_users=1 num_items=2 draws=1\ndraw,user_id,item_id,z,y\n0,0,2,1,1\n";
        assert!(matches!(read_split(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
    }
}
