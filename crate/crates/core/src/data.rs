//! Datasets: LINQS citation files, synthetic block-model graphs, random
//! per-class splits and a flat binary cache.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{build_csr, EdgeList};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Train/validation/test node ids, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// True when the three sets are pairwise disjoint and cover `0..n`.
    pub fn is_partition(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Undirected edges in canonical form (see [`EdgeList::canonical`]).
    pub graph: EdgeList,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub splits: Option<Splits>,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Scales every feature row to sum to one; all-zero rows stay zero.
    pub fn row_normalize(&mut self) {
        for r in 0..self.features.rows() {
            let row = self.features.row_mut(r);
            let total: f64 = row.iter().sum();
            if total != 0.0 {
                for v in row {
                    *v /= total;
                }
            }
        }
    }
}

/// Result of reading a LINQS `.content`/`.cites` pair.
#[derive(Debug, Clone)]
pub struct LinqsLoad {
    pub dataset: Dataset,
    /// Citation lines naming a paper absent from the content file.
    pub skipped_citations: usize,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads the LINQS plain-text format.
///
/// Content lines are `<paper id> <f_1> .. <f_d> <class label>`, cites lines
/// are `<cited id> <citing id>`; fields are split on any whitespace. Paper ids get
/// dense indices in order of first appearance and class labels are numbered
/// in sorted order.
pub fn load_linqs(content_path: &Path, cites_path: &Path) -> Result<LinqsLoad> {
    let content = fs::File::open(content_path).map_err(|e| Error::io(content_path, e))?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;

    for (i, line) in BufReader::new(content).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(content_path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 3 {
            return Err(parse_error(
                content_path,
                line_no,
                format!("expected id, features and label, found {} fields", fields.len()),
            ));
        }
        let d = fields.len() - 2;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(parse_error(
                    content_path,
                    line_no,
                    format!("{d} features, earlier lines have {w}"),
                ))
            }
            Some(_) => {}
        }
        let id = fields[0];
        if ids.insert(id.to_string(), raw_labels.len()).is_some() {
            return Err(parse_error(content_path, line_no, format!("duplicate paper id {id}")));
        }
        for f in &fields[1..=d] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_error(content_path, line_no, format!("bad feature value {f:?}")))?;
            features.push(v);
        }
        raw_labels.push(fields[d + 1].to_string());
    }
    let d = width.ok_or_else(|| parse_error(content_path, 0, "no papers in content file"))?;
    let n = raw_labels.len();

    let class_names: Vec<String> = raw_labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_of: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let labels = raw_labels.iter().map(|l| class_of[l.as_str()]).collect();

    let cites = fs::File::open(cites_path).map_err(|e| Error::io(cites_path, e))?;
    let mut edges = Vec::new();
    let mut skipped = 0;
    for (i, line) in BufReader::new(cites).lines().enumerate() {
        let line = line.map_err(|e| Error::io(cites_path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [cited, citing] => match (ids.get(*cited), ids.get(*citing)) {
                (Some(&a), Some(&b)) => edges.push((a, b)),
                _ => skipped += 1,
            },
            other => {
                return Err(parse_error(
                    cites_path,
                    i + 1,
                    format!("expected 2 fields, found {}", other.len()),
                ))
            }
        }
    }

    let name = content_path
        .file_stem()
        .map_or_else(|| "linqs".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(LinqsLoad {
        dataset: Dataset {
            name,
            graph: EdgeList::new(n, edges).canonical(),
            features: Tensor::from_vec(n, d, features)?,
            labels,
            num_classes: class_names.len(),
            class_names,
            splits: None,
        },
        skipped_citations: skipped,
    })
}

/// Parameters of a stochastic block model graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmParams {
    pub blocks: usize,
    pub per_block: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub features: usize,
    pub seed: u64,
}

/// Stochastic block model with block ids as labels. Features hold the
/// one-hot block id in the first `blocks` columns and uniform noise in
/// `[0, 0.1)` in the remaining columns.
pub fn generate_sbm(params: &SbmParams) -> Result<Dataset> {
    let SbmParams {
        blocks,
        per_block,
        p_intra,
        p_inter,
        features: d,
        seed,
    } = *params;
    if !(0.0..=1.0).contains(&p_intra) || !(0.0..=1.0).contains(&p_inter) || p_inter > p_intra {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= p_inter <= p_intra <= 1, got p_intra={p_intra}, p_inter={p_inter}"
        )));
    }
    if blocks == 0 || per_block == 0 {
        return Err(Error::InvalidArgument("blocks and per_block must be positive".into()));
    }
    if d < blocks {
        return Err(Error::InvalidArgument(format!(
            "feature width {d} smaller than block count {blocks}"
        )));
    }
    let n = blocks * per_block;
    let block = |i: usize| i / per_block;
    let mut rng = rng::stream(seed, Stream::Data);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block(i) == block(j) { p_intra } else { p_inter };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let mut features = Tensor::zeros(n, d);
    for i in 0..n {
        let row = features.row_mut(i);
        row[block(i)] = 1.0;
        for v in &mut row[blocks..] {
            *v = rng.random_range(0.0..0.1);
        }
    }

    Ok(Dataset {
        name: format!("sbm-{blocks}x{per_block}"),
        graph: EdgeList::new(n, edges),
        features,
        labels: (0..n).map(block).collect(),
        num_classes: blocks,
        class_names: (0..blocks).map(|b| format!("block{b}")).collect(),
        splits: None,
    })
}

/// Samples `train_per_class` then `val_per_class` nodes of every class
/// without replacement; the rest become test nodes.
pub fn make_splits(
    dataset: &Dataset,
    train_per_class: usize,
    val_per_class: usize,
    seed: u64,
) -> Result<Splits> {
    let mut rng = rng::stream(seed, Stream::Split);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (node, &c) in dataset.labels.iter().enumerate() {
        by_class[c].push(node);
    }
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.len() <= train_per_class + val_per_class {
            let name = dataset.class_names.get(c).map_or("?", String::as_str);
            return Err(Error::InvalidArgument(format!(
                "class {c} ({name}) has {} nodes, needs more than {}",
                members.len(),
                train_per_class + val_per_class
            )));
        }
        members.shuffle(&mut rng);
        splits.train.extend_from_slice(&members[..train_per_class]);
        splits
            .val
            .extend_from_slice(&members[train_per_class..train_per_class + val_per_class]);
        splits
            .test
            .extend_from_slice(&members[train_per_class + val_per_class..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

/// Magic bytes opening a dataset cache file; followed by a little-endian
/// u32 version and four zero bytes.
pub const CACHE_MAGIC: &[u8; 8] = b"MPGCNDS\0";
pub const CACHE_VERSION: u32 = 1;

/// Writes the binary cache:
///
/// ```text
/// magic[8] version:u32 reserved:u32
/// n:u64 d:u64 c:u64 nnz:u64
/// row_offsets:[u64; n+1] col_indices:[u64; nnz]
/// features:[f64; n*d] (row-major) labels:[u32; n]
/// ```
///
/// All integers and floats are little-endian. The adjacency is the
/// symmetric binary matrix of the graph without added self-loops.
pub fn write_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    let adjacency = build_csr(&dataset.graph)?;
    let n = dataset.num_nodes();
    let d = dataset.num_features();
    let mut buf = Vec::with_capacity(48 + 8 * (n + 1 + adjacency.nnz() + n * d) + 4 * n);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for count in [n, d, dataset.num_classes, adjacency.nnz()] {
        buf.extend_from_slice(&(count as u64).to_le_bytes());
    }
    for &o in adjacency.row_offsets() {
        buf.extend_from_slice(&(o as u64).to_le_bytes());
    }
    for &c in adjacency.col_indices() {
        buf.extend_from_slice(&(c as u64).to_le_bytes());
    }
    for &v in dataset.features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &dataset.labels {
        let l = u32::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds u32")))?;
        buf.extend_from_slice(&l.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| {
            parse_error(self.path, 0, format!("truncated cache at byte {}", self.pos))
        })?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| parse_error(self.path, 0, format!("count {v} too large")))
    }
}

/// Reads a file written by [`write_cache`]. The dataset name is the file stem.
pub fn read_cache(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if &cur.take::<8>()? != CACHE_MAGIC {
        return Err(parse_error(path, 0, "not a dataset cache (bad magic)"));
    }
    let version = u32::from_le_bytes(cur.take::<4>()?);
    if version != CACHE_VERSION {
        return Err(parse_error(path, 0, format!("unsupported cache version {version}")));
    }
    cur.take::<4>()?;
    let (n, d, c, nnz) = (cur.usize()?, cur.usize()?, cur.usize()?, cur.usize()?);
    let expected = 32 + 8 * (n + 1 + nnz + n * d) + 4 * n;
    if bytes.len() != 16 + expected {
        return Err(parse_error(
            path,
            0,
            format!("cache is {} bytes, header implies {}", bytes.len(), 16 + expected),
        ));
    }
    let row_offsets = (0..=n).map(|_| cur.usize()).collect::<Result<Vec<_>>>()?;
    let col_indices = (0..nnz).map(|_| cur.usize()).collect::<Result<Vec<_>>>()?;
    let features = (0..n * d)
        .map(|_| cur.take::<8>().map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..n)
        .map(|_| cur.take::<4>().map(|b| u32::from_le_bytes(b) as usize))
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(parse_error(path, 0, format!("label {bad} out of range for {c} classes")));
    }
    let adjacency = crate::graph::CsrMatrix::from_parts(n, n, row_offsets, col_indices, vec![1.0; nnz])?;
    if !adjacency.is_symmetric() {
        return Err(parse_error(path, 0, "adjacency is not symmetric"));
    }
    let name = path
        .file_stem()
        .map_or_else(|| "cache".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset {
        name,
        graph: EdgeList::from_adjacency(&adjacency),
        features: Tensor::from_vec(n, d, features)?,
        labels,
        num_classes: c,
        class_names: (0..c).map(|i| format!("class{i}")).collect(),
        splits: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    const CONTENT: &str = "p31\t0\t1\t0\t1\tTheory\n\
                           p7\t1\t0\t0\t0\tAI\n\
                           p12\t0\t0\t1\t1\tTheory\n";

    #[test]
    fn loads_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let content = write(dir.path(), "tiny.content", CONTENT);
        let cites = write(dir.path(), "tiny.cites", "p7\tp31\np12\tp31\n");
        let load = load_linqs(&content, &cites).unwrap();
        let ds = load.dataset;
        assert_eq!(load.skipped_citations, 0);
        assert_eq!(ds.num_nodes(), 3);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.class_names, vec!["AI", "Theory"]);
        assert_eq!(ds.labels, vec![1, 0, 1]);
        assert_eq!(ds.features.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(ds.features.row(1), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(ds.graph.edges, vec![(0, 1), (0, 2)]);
        let a = build_csr(&ds.graph).unwrap();
        assert!(a.is_symmetric());
        assert_eq!(a.get(1, 0), Some(1.0));
        assert_eq!(ds.name, "tiny");
    }

    #[test]
    fn dangling_citation_is_counted() {
        let dir = tempfile::tempdir().unwrap();
        let content = write(dir.path(), "tiny.content", CONTENT);
        let clean = write(dir.path(), "a.cites", "p7\tp31\np12\tp31\n");
        let dangling = write(dir.path(), "b.cites", "p7\tp31\np99\tp7\np12\tp31\n");
        let a = load_linqs(&content, &clean).unwrap();
        let b = load_linqs(&content, &dangling).unwrap();
        assert_eq!(b.skipped_citations, 1);
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cites = write(dir.path(), "x.cites", "");
        let empty = write(dir.path(), "empty.content", "");
        assert!(load_linqs(&empty, &cites).is_err());

        let ragged = write(dir.path(), "ragged.content", "a\t1\t0\tX\nb\t1\tY\n");
        let err = load_linqs(&ragged, &cites).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");

        let short = write(dir.path(), "short.content", "a\t1\t0\tX\nb\tY\n");
        let err = load_linqs(&short, &cites).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");

        let content = write(dir.path(), "ok.content", CONTENT);
        let bad_cites = write(dir.path(), "bad.cites", "p7\tp31\np7\tp31\tp12\n");
        let err = load_linqs(&content, &bad_cites).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");

        let missing = dir.path().join("missing.content");
        assert!(matches!(load_linqs(&missing, &cites), Err(Error::Io { .. })));
    }

    #[test]
    fn sbm_degenerate_probabilities() {
        let cliques = generate_sbm(&SbmParams {
            blocks: 2,
            per_block: 3,
            p_intra: 1.0,
            p_inter: 0.0,
            features: 4,
            seed: 3,
        })
        .unwrap();
        assert_eq!(
            cliques.graph.edges,
            vec![(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]
        );
        assert_eq!(cliques.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(cliques.features.row(4)[..2], [0.0, 1.0]);
        assert!(cliques.features.row(4)[2..].iter().all(|&v| (0.0..0.1).contains(&v)));

        let empty = generate_sbm(&SbmParams {
            blocks: 2,
            per_block: 3,
            p_intra: 0.0,
            p_inter: 0.0,
            features: 2,
            seed: 3,
        })
        .unwrap();
        assert!(empty.graph.edges.is_empty());
    }

    #[test]
    fn sbm_rejects_bad_parameters() {
        let base = SbmParams {
            blocks: 2,
            per_block: 3,
            p_intra: 0.5,
            p_inter: 0.1,
            features: 4,
            seed: 0,
        };
        assert!(generate_sbm(&SbmParams { p_inter: 0.6, ..base.clone() }).is_err());
        assert!(generate_sbm(&SbmParams { p_intra: 1.5, ..base.clone() }).is_err());
        assert!(generate_sbm(&SbmParams { features: 1, ..base.clone() }).is_err());
        assert!(generate_sbm(&base).is_ok());
    }

    #[test]
    fn sbm_intra_edges_concentrate() {
        let ds = generate_sbm(&SbmParams {
            blocks: 2,
            per_block: 50,
            p_intra: 0.8,
            p_inter: 0.05,
            features: 4,
            seed: 1,
        })
        .unwrap();
        let intra = ds.graph.edges.iter().filter(|(a, b)| a / 50 == b / 50).count() as f64;
        let trials: f64 = 2.0 * (50.0 * 49.0 / 2.0);
        let mean = 0.8 * trials;
        let sigma = (trials * 0.8 * 0.2).sqrt();
        assert!((intra - mean).abs() <= 3.0 * sigma, "{intra} vs {mean} ± {sigma}");
        let a = build_csr(&ds.graph).unwrap();
        assert!(a.is_symmetric());
        assert!((0..100).all(|i| a.get(i, i).is_none()));
    }

    fn sbm(seed: u64) -> Dataset {
        generate_sbm(&SbmParams {
            blocks: 3,
            per_block: 20,
            p_intra: 0.3,
            p_inter: 0.02,
            features: 5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn splits_partition_and_are_deterministic() {
        let ds = sbm(4);
        let s = make_splits(&ds, 5, 7, 11).unwrap();
        assert_eq!(s.train.len(), 15);
        assert_eq!(s.val.len(), 21);
        assert_eq!(s.test.len(), 24);
        assert!(s.is_partition(60));
        assert_eq!(s, make_splits(&ds, 5, 7, 11).unwrap());
        assert_ne!(s, make_splits(&ds, 5, 7, 12).unwrap());
        for c in 0..3 {
            assert_eq!(s.train.iter().filter(|&&i| ds.labels[i] == c).count(), 5);
        }
    }

    #[test]
    fn splits_reject_small_class() {
        let ds = sbm(4);
        let err = make_splits(&ds, 21, 0, 0).unwrap_err().to_string();
        assert!(err.contains("class 0 (block0)"), "{err}");
        assert!(make_splits(&ds, 10, 10, 0).is_err());
        assert!(make_splits(&ds, 10, 9, 0).is_ok());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = sbm(5);
        ds.graph = ds.graph.canonical();
        let path = dir.path().join("sbm.bin");
        write_cache(&ds, &path).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back.graph, ds.graph);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.num_classes, ds.num_classes);
        assert!(back
            .features
            .data()
            .iter()
            .zip(ds.features.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        // header layout
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CACHE_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 60);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 5);
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 3);

        // rewriting the reloaded dataset gives identical bytes
        let again = dir.path().join("again.bin");
        write_cache(&back, &again).unwrap();
        assert_eq!(fs::read(&again).unwrap(), bytes);
    }

    #[test]
    fn cache_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_cache(&sbm(6), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(read_cache(&path).is_err());
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(read_cache(&path).is_err());
    }

    #[test]
    fn row_normalize_scales_rows() {
        let mut ds = sbm(7);
        ds.features.row_mut(0).fill(0.0);
        ds.row_normalize();
        assert!(ds.features.row(0).iter().all(|&v| v == 0.0));
        for r in 1..ds.num_nodes() {
            assert!((ds.features.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
