use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::executor::ExecutorRegistry;
use crate::builder::{extract_dependencies, validate_builder_set, BuilderSet, BuilderTypes};
use crate::error::{Error, Result};
use crate::ids::InstanceId;
use crate::store::{sha256_hex, InstanceMeta, Phase, Store};

/// Key under which a reference's pinned instance is recorded: the table name
/// for `LATEST`, `table(selector)` for an explicit instance.
pub fn pin_key(table: &str, instance: Option<&str>) -> String {
    match instance {
        Some(sel) => format!("{table}({sel})"),
        None => table.to_string(),
    }
}

/// Everything fixed before a generation starts. Persisted in the op log so
/// a resumed run sees the same pins and the same previous instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanInputs {
    pub pins: BTreeMap<String, InstanceId>,
    #[serde(default)]
    pub previous: Option<InstanceId>,
    pub builder_hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct GenerationPlan {
    pub table: String,
    pub instance: InstanceId,
    pub builders: BuilderSet,
    /// Builder filename → sha256 of its bytes.
    pub builder_hashes: BTreeMap<String, String>,
    pub pinned_deps: BTreeMap<String, InstanceId>,
    /// Materialized instance whose cells may be carried over.
    pub previous: Option<InstanceId>,
    /// Columns carried over from `previous`, subject to per-row input checks.
    pub retained_columns: BTreeSet<String>,
    /// Builder filenames, generator first, dependencies before dependents.
    pub builder_order: Vec<String>,
    /// Builder filename → hash of its bytes and the pins it reads.
    pub fingerprints: BTreeMap<String, String>,
}

impl GenerationPlan {
    pub fn inputs(&self) -> PlanInputs {
        PlanInputs {
            pins: self.pinned_deps.clone(),
            previous: self.previous.clone(),
            builder_hashes: self.builder_hashes.clone(),
        }
    }

    pub fn builder(&self, filename: &str) -> &crate::builder::Builder {
        self.builders.builders().iter().find(|b| b.filename == filename).expect("planned builder")
    }
}

/// Parse and validate the builders of an instance.
pub fn load_builders(
    store: &Store,
    types: &BuilderTypes,
    table: &str,
    instance: &InstanceId,
) -> Result<(BuilderSet, BTreeMap<String, String>)> {
    let mut parsed = Vec::new();
    let mut hashes = BTreeMap::new();
    for (name, bytes) in store.builder_files(table, instance)? {
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::InvalidArgument(format!("builder {name} is not UTF-8")))?;
        parsed.push(types.parse(&text, &name)?);
        hashes.insert(name, sha256_hex(&bytes));
    }
    let set = validate_builder_set(parsed)?;
    extract_dependencies(&set)?;
    Ok((set, hashes))
}

/// Tables referenced by name anywhere in the builders.
pub fn dependency_tables(set: &BuilderSet) -> Result<BTreeSet<String>> {
    Ok(extract_dependencies(set)?.tables())
}

/// Latest active materialized instance of `table`.
pub fn latest_active(store: &Store, table: &str) -> Result<Option<InstanceId>> {
    let mut best = None;
    for id in store.list_instances(table)? {
        let meta = store.read_meta(table, &id)?;
        if meta.active && meta.phase == Phase::Materialized {
            best = Some(id);
        }
    }
    Ok(best)
}

/// Pin every external reference to a concrete materialized instance.
/// Callers hold shared locks on the referenced tables.
pub fn pin_dependencies(store: &Store, set: &BuilderSet) -> Result<BTreeMap<String, InstanceId>> {
    let mut pins = BTreeMap::new();
    for dep in extract_dependencies(set)?.external {
        let key = pin_key(&dep.table, dep.instance.as_deref());
        if pins.contains_key(&key) {
            continue;
        }
        if !store.table_exists(&dep.table) {
            return Err(Error::DependencyNotMaterialized(key));
        }
        let id = match &dep.instance {
            None => latest_active(store, &dep.table)?,
            Some(sel) => match store.resolve_instance(&dep.table, sel) {
                Ok(id) if store.read_meta(&dep.table, &id)?.phase == Phase::Materialized => Some(id),
                Ok(_) | Err(Error::NoSuchInstance { .. }) => None,
                Err(e) => return Err(e),
            },
        };
        pins.insert(key.clone(), id.ok_or(Error::DependencyNotMaterialized(key))?);
    }
    Ok(pins)
}

/// The instance whose cells a new generation may reuse: the origin if it is
/// materialized, else the latest active instance of the table.
pub fn previous_instance(store: &Store, table: &str, meta: &InstanceMeta) -> Result<Option<InstanceId>> {
    if let Some(origin) = &meta.origin {
        if store.instance_exists(table, origin) && store.read_meta(table, origin)?.phase == Phase::Materialized {
            return Ok(Some(origin.clone()));
        }
    }
    Ok(latest_active(store, table)?.filter(|id| id != &meta.instance))
}

/// Topological order of the builders with the generator first. Ties are
/// broken by filename.
pub fn builder_order(set: &BuilderSet) -> Result<Vec<String>> {
    let deps = extract_dependencies(set)?;
    let gen = set.generator().filename.clone();
    let names: BTreeSet<String> = set.builders().iter().map(|b| b.filename.clone()).collect();
    // Builder → the builders it reads from.
    let mut waiting: BTreeMap<&str, BTreeSet<&str>> = names.iter().map(|n| (n.as_str(), BTreeSet::new())).collect();
    for (dependent, dependency) in &deps.internal {
        if dependent == dependency {
            return Err(Error::BuilderCycle(vec![dependent.clone(), dependent.clone()]));
        }
        if dependency != &gen {
            waiting.get_mut(dependent.as_str()).expect("known builder").insert(dependency.as_str());
        }
    }
    if !waiting[gen.as_str()].is_empty() {
        let first = waiting[gen.as_str()].iter().next().expect("nonempty").to_string();
        return Err(Error::BuilderCycle(vec![gen.clone(), first]));
    }
    let mut order = vec![gen.clone()];
    let mut done: BTreeSet<&str> = BTreeSet::from([gen.as_str()]);
    while done.len() < names.len() {
        let next = waiting
            .iter()
            .find(|(n, deps)| !done.contains(*n) && deps.iter().all(|d| done.contains(d)))
            .map(|(n, _)| *n);
        match next {
            Some(n) => {
                done.insert(n);
                order.push(n.to_string());
            }
            None => return Err(Error::BuilderCycle(find_cycle(&waiting, &done))),
        }
    }
    Ok(order)
}

fn find_cycle(waiting: &BTreeMap<&str, BTreeSet<&str>>, done: &BTreeSet<&str>) -> Vec<String> {
    let start = waiting.keys().find(|n| !done.contains(*n)).expect("unfinished builder");
    let mut path = vec![*start];
    loop {
        let cur = *path.last().expect("nonempty");
        let next = waiting[cur].iter().find(|d| !done.contains(*d)).expect("blocked builder has an open dependency");
        if let Some(pos) = path.iter().position(|p| p == next) {
            let mut cycle: Vec<String> = path[pos..].iter().map(|s| s.to_string()).collect();
            cycle.push(next.to_string());
            return cycle;
        }
        path.push(next);
    }
}

/// Build the plan from already-pinned inputs.
pub fn plan_generation(
    store: &Store,
    executors: &ExecutorRegistry,
    table: &str,
    instance: &InstanceId,
    builders: BuilderSet,
    inputs: PlanInputs,
) -> Result<GenerationPlan> {
    for b in builders.builders() {
        if executors.get(&b.function.executor).is_none() {
            return Err(Error::ExecutorFailure {
                builder: b.filename.clone(),
                row: None,
                cause: format!("no executor registered for kind {:?}", b.function.executor),
            });
        }
    }
    let builder_order = builder_order(&builders)?;

    let mut fingerprints = BTreeMap::new();
    for b in builders.builders() {
        let mut pinned = BTreeMap::new();
        for ast in b.references() {
            if let Some(t) = ast.table_name() {
                let key = pin_key(t, ast.instance.as_deref());
                if let Some(id) = inputs.pins.get(&key) {
                    pinned.insert(key, id.to_string());
                }
            }
        }
        let canon = serde_json::to_string(&pinned).expect("serializable");
        let hash = &inputs.builder_hashes[&b.filename];
        fingerprints.insert(b.filename.clone(), sha256_hex(format!("{hash}\n{canon}").as_bytes()));
    }

    let mut retained = BTreeSet::new();
    if let Some(prev) = &inputs.previous {
        let pm = store.read_meta(table, prev)?;
        let pdf = store.load_dataframe(table, prev)?;
        let keys_match = pdf.as_ref().is_some_and(|df| {
            df.key_columns() == builders.key_columns()
                && df
                    .key_columns()
                    .iter()
                    .all(|k| df.column(k).map(|c| c.dtype) == Some(builders.generator().dtype_of(k)))
        });
        if let (true, Some(df)) = (keys_match, pdf) {
            for b in builders.builders().iter().filter(|b| !b.is_generator) {
                if pm.builder_hashes.get(&b.filename) != Some(&inputs.builder_hashes[&b.filename]) {
                    continue;
                }
                for c in &b.changed_columns {
                    let same_owner = pm.column_owners.get(c) == Some(&b.filename);
                    let same_dtype = df.column(c).map(|col| col.dtype) == Some(b.dtype_of(c));
                    if same_owner && same_dtype {
                        retained.insert(c.clone());
                    }
                }
            }
        }
    }

    Ok(GenerationPlan {
        table: table.into(),
        instance: instance.clone(),
        builders,
        builder_hashes: inputs.builder_hashes,
        pinned_deps: inputs.pins,
        previous: inputs.previous,
        retained_columns: retained,
        builder_order,
        fingerprints,
    })
}
