//! Episode CSV: `episode_id,split,role,label,f0,...,f{d-1}`, one sample per
//! row, features written with 17 significant digits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::autodiff::Tensor;

use super::{Episode, EpisodeError, EpisodeMeta, Split};

pub fn write_episodes<W: Write>(mut out: W, episodes: &[Episode]) -> std::io::Result<()> {
    let Some(first) = episodes.first() else {
        return Ok(());
    };
    write!(out, "episode_id,split,role,label")?;
    for j in 0..first.dim() {
        write!(out, ",f{j}")?;
    }
    writeln!(out)?;
    for ep in episodes {
        for (role, x, y) in [("train", &ep.train_x, &ep.train_y), ("test", &ep.test_x, &ep.test_y)] {
            for (r, label) in y.iter().enumerate() {
                write!(out, "{},{},{role},{label}", ep.meta.episode_id, ep.meta.split)?;
                for v in x.row_slice(r) {
                    write!(out, ",{v:.16e}")?;
                }
                writeln!(out)?;
            }
        }
    }
    out.flush()
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<(), EpisodeError> {
    let io = |source| EpisodeError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_episodes(BufWriter::new(file), episodes).map_err(io)
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>, EpisodeError> {
    let file = File::open(path).map_err(|source| EpisodeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_episodes(BufReader::new(file))
}

#[derive(Default)]
struct Part {
    rows: Vec<f64>,
    labels: Vec<usize>,
    lines: Vec<usize>,
}

struct Pending {
    split: Split,
    train: Part,
    test: Part,
}

pub fn read_episodes<R: BufRead>(input: R) -> Result<Vec<Episode>, EpisodeError> {
    let mut lines = input.lines().enumerate();
    let parse_err = |line: usize, message: String| EpisodeError::Parse { line, message };

    let header = loop {
        match lines.next() {
            None => return Ok(Vec::new()),
            Some((i, line)) => {
                let line = line.map_err(|e| parse_err(i + 1, e.to_string()))?;
                if !line.trim().is_empty() {
                    break (i + 1, line);
                }
            }
        }
    };
    let cols: Vec<&str> = header.1.trim().split(',').collect();
    if cols.len() < 5 || cols[..4] != ["episode_id", "split", "role", "label"] {
        return Err(parse_err(header.0, "expected header `episode_id,split,role,label,f0,...`".into()));
    }
    for (j, name) in cols[4..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(parse_err(header.0, format!("feature column {j} is named `{name}`")));
        }
    }
    let d = cols.len() - 4;

    let mut order: Vec<u64> = Vec::new();
    let mut pending: BTreeMap<u64, Pending> = BTreeMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| parse_err(lineno, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 4 {
            return Err(parse_err(lineno, format!("expected {} fields, found {}", d + 4, fields.len())));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad episode_id `{}`", fields[0])))?;
        let split: Split = fields[1].parse().map_err(|e| parse_err(lineno, e))?;
        let label: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad label `{}`", fields[3])))?;
        let entry = pending.entry(id).or_insert_with(|| {
            order.push(id);
            Pending {
                split,
                train: Part::default(),
                test: Part::default(),
            }
        });
        if entry.split != split {
            return Err(parse_err(lineno, format!("episode {id} mixes splits {} and {split}", entry.split)));
        }
        let part = match fields[2] {
            "train" => &mut entry.train,
            "test" => &mut entry.test,
            other => return Err(parse_err(lineno, format!("role must be train or test, found `{other}`"))),
        };
        for (j, f) in fields[4..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("feature f{j} is not a number: `{f}`")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("feature f{j} is not finite")));
            }
            part.rows.push(v);
        }
        part.labels.push(label);
        part.lines.push(lineno);
    }

    order
        .into_iter()
        .map(|id| {
            let p = pending.remove(&id).expect("recorded above");
            finish(id, p, d)
        })
        .collect()
}

fn finish(id: u64, p: Pending, d: usize) -> Result<Episode, EpisodeError> {
    let first_line = p.train.lines.first().or(p.test.lines.first()).copied().unwrap_or(0);
    if p.train.labels.is_empty() || p.test.labels.is_empty() {
        return Err(EpisodeError::Parse {
            line: first_line,
            message: format!("episode {id} needs both train and test rows"),
        });
    }
    let n_way = p.train.labels.iter().max().expect("non-empty") + 1;
    for (role, part) in [("train", &p.train), ("test", &p.test)] {
        let mut counts = vec![0usize; n_way];
        for (&label, &line) in part.labels.iter().zip(&part.lines) {
            if label >= n_way {
                return Err(EpisodeError::Parse {
                    line,
                    message: format!("episode {id} {role} label {label} has no train samples"),
                });
            }
            counts[label] += 1;
        }
        // The most common count is taken as K (or Q); ties go to the smaller.
        let mut tally: BTreeMap<usize, usize> = BTreeMap::new();
        for &c in &counts {
            *tally.entry(c).or_default() += 1;
        }
        let expected = tally
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&c, _)| c)
            .unwrap_or(0);
        if let Some(class) = counts.iter().position(|&c| c != expected) {
            let line = part
                .labels
                .iter()
                .zip(&part.lines)
                .filter(|(&l, _)| l == class)
                .map(|(_, &line)| line)
                .next_back()
                .unwrap_or(first_line);
            return Err(EpisodeError::LabelCount {
                line,
                episode: id,
                role,
                class,
                count: counts[class],
                expected,
            });
        }
    }
    let train_x = Tensor::new(vec![p.train.labels.len(), d], p.train.rows).expect("sized");
    let test_x = Tensor::new(vec![p.test.labels.len(), d], p.test.rows).expect("sized");
    Ok(Episode {
        train_x,
        train_y: p.train.labels,
        test_x,
        test_y: p.test.labels,
        meta: EpisodeMeta {
            generator: "file".into(),
            seed: 0,
            episode_id: id,
            split: p.split,
            classes: (0..n_way).collect(),
        },
    })
}
