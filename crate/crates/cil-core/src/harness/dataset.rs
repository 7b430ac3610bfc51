//! Labeled instances, their grouping into an incremental task stream, and a
//! plain-text interchange format.
//!
//! The on-disk format is one file per split: a header line naming the label
//! column and each of the `seq_len * token_dim` value columns, then one
//! instance per line as the integer label followed by the values. Floats are
//! written with 17 significant digits, which round-trips every finite double
//! bit for bit.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One labeled example: the flattened token matrix, row-major, with
/// `seq_len * token_dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tokens: Vec<f64>,
    pub class_id: usize,
}

/// Everything one incremental stage introduces: its 1-based id, the classes
/// it brings (in classifier column order), and its splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Tasks in arrival order with pairwise disjoint class sets.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalStream {
    pub tasks: Vec<TaskData>,
}

impl IncrementalStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Union of the test splits of stages `1..=stage`, in task order.
    pub fn test_up_to(&self, stage: usize) -> Vec<Instance> {
        assert!(
            stage >= 1 && stage <= self.tasks.len(),
            "test_up_to: stage {stage} outside 1..={}",
            self.tasks.len()
        );
        self.tasks[..stage]
            .iter()
            .flat_map(|t| t.test.iter().cloned())
            .collect()
    }

    /// Structural checks: contiguous 1-based task ids, nonempty disjoint
    /// class sets, labels confined to their task, nonempty splits, and one
    /// consistent token length everywhere.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Data("stream has no tasks".into()));
        }
        let mut seen_classes = BTreeSet::new();
        let mut token_len: Option<usize> = None;
        for (i, task) in self.tasks.iter().enumerate() {
            if task.task_id != i + 1 {
                return Err(Error::Data(format!(
                    "task at position {i} has id {}, expected {}",
                    task.task_id,
                    i + 1
                )));
            }
            if task.class_ids.is_empty() {
                return Err(Error::Data(format!("task {} introduces no classes", task.task_id)));
            }
            let class_set: BTreeSet<usize> = task.class_ids.iter().copied().collect();
            if class_set.len() != task.class_ids.len() {
                return Err(Error::Data(format!("task {} repeats a class id", task.task_id)));
            }
            if let Some(&dup) = class_set.intersection(&seen_classes).next() {
                return Err(Error::Data(format!(
                    "class {dup} appears in task {} and an earlier task",
                    task.task_id
                )));
            }
            seen_classes.extend(&class_set);
            for (split_name, split) in [("train", &task.train), ("test", &task.test)] {
                if split.is_empty() {
                    return Err(Error::Data(format!(
                        "task {} has an empty {split_name} split",
                        task.task_id
                    )));
                }
                for inst in split {
                    if !class_set.contains(&inst.class_id) {
                        return Err(Error::Data(format!(
                            "task {} {split_name} split contains label {} from outside the task",
                            task.task_id, inst.class_id
                        )));
                    }
                    match token_len {
                        None => token_len = Some(inst.tokens.len()),
                        Some(l) if l != inst.tokens.len() => {
                            return Err(Error::Data(format!(
                                "instance with {} token values next to others with {l}",
                                inst.tokens.len()
                            )))
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        Ok(())
    }
}

/// Write instances to a delimited text file. `values_per_instance` fixes the
/// column count; every instance must match it.
pub fn export_instances(
    path: &Path,
    instances: &[Instance],
    values_per_instance: usize,
) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "label")?;
    for i in 0..values_per_instance {
        write!(out, ",v{i}")?;
    }
    writeln!(out)?;
    for (i, inst) in instances.iter().enumerate() {
        if inst.tokens.len() != values_per_instance {
            return Err(Error::Data(format!(
                "instance {i} has {} values, header says {values_per_instance}",
                inst.tokens.len()
            )));
        }
        write!(out, "{}", inst.class_id)?;
        for v in &inst.tokens {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Read instances back. Returns the instances and the value count declared
/// by the header. Malformed lines are reported with their 1-based line
/// number.
pub fn load_instances(path: &Path) -> Result<(Vec<Instance>, usize)> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file, expected a header line", path.display())))??;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"label") || columns.len() < 2 {
        return Err(Error::Data(format!(
            "{}:1: header must be \"label\" followed by value columns, got {header:?}",
            path.display()
        )));
    }
    let values_per_instance = columns.len() - 1;

    let mut instances = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().expect("split yields at least one field");
        let class_id: usize = label_field.parse().map_err(|_| {
            Error::Data(format!(
                "{}:{line_no}: label {label_field:?} is not a nonnegative integer",
                path.display()
            ))
        })?;
        let mut tokens = Vec::with_capacity(values_per_instance);
        for field in fields {
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{line_no}: value {field:?} is not a number",
                    path.display()
                ))
            })?;
            tokens.push(v);
        }
        if tokens.len() != values_per_instance {
            return Err(Error::Data(format!(
                "{}:{line_no}: {} values, header declares {values_per_instance}",
                path.display(),
                tokens.len()
            )));
        }
        instances.push(Instance { tokens, class_id });
    }
    Ok((instances, values_per_instance))
}

/// Build a stream from flat train and test pools using a class partition
/// (one inner vector per task, in arrival order). Every partition class must
/// appear in both pools, and the pools must not contain stray classes.
pub fn assemble_stream(
    train: &[Instance],
    test: &[Instance],
    partition: &[Vec<usize>],
) -> Result<IncrementalStream> {
    let mut expected: BTreeSet<usize> = BTreeSet::new();
    for classes in partition {
        for &c in classes {
            if !expected.insert(c) {
                return Err(Error::Data(format!("class {c} appears twice in the partition")));
            }
        }
    }
    for (name, pool) in [("train", train), ("test", test)] {
        for inst in pool {
            if !expected.contains(&inst.class_id) {
                return Err(Error::Data(format!(
                    "{name} pool contains class {} which is not in the partition",
                    inst.class_id
                )));
            }
        }
    }

    let group = |pool: &[Instance]| -> std::collections::BTreeMap<usize, Vec<Instance>> {
        let mut grouped: std::collections::BTreeMap<usize, Vec<Instance>> = Default::default();
        for inst in pool {
            grouped.entry(inst.class_id).or_default().push(inst.clone());
        }
        grouped
    };
    let train_by_class = group(train);
    let test_by_class = group(test);

    let mut tasks = Vec::with_capacity(partition.len());
    for (i, classes) in partition.iter().enumerate() {
        let mut task = TaskData {
            task_id: i + 1,
            class_ids: classes.clone(),
            train: Vec::new(),
            test: Vec::new(),
        };
        for &c in classes {
            let tr = train_by_class
                .get(&c)
                .ok_or_else(|| Error::Data(format!("class {c} has no training instances")))?;
            let te = test_by_class
                .get(&c)
                .ok_or_else(|| Error::Data(format!("class {c} has no test instances")))?;
            task.train.extend(tr.iter().cloned());
            task.test.extend(te.iter().cloned());
        }
        tasks.push(task);
    }
    let stream = IncrementalStream { tasks };
    stream.validate()?;
    Ok(stream)
}
