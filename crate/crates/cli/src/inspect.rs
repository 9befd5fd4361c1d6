//! `amg inspect-graph`: layer-0 graphs of one sample as delimited text.
//!
//! ```text
//! nodes.csv     node, position, input, H_F, selection flags
//! selected.csv  graph, rank, node (local in H_F order, global in FPS order)
//! edges.csv     graph, source, target
//! degrees.csv   graph, in_degree, nodes (histogram)
//! summary.txt   counts and construction checks
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use amg_core::checkpoint::{self, Net};
use amg_core::data::{read_manifest, read_split, SampleRecord, Split};
use amg_core::graph::{GraphTopology, MultiGraph};
use amg_core::model::{AmgModel, ModelConfig};
use amg_core::train::Normalizer;
use amg_core::Scalar;

use crate::config::{ModelKind, Precision, RunConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::InspectArgs;

struct Inspection {
    graphs: MultiGraph,
    config: ModelConfig,
    n: usize,
}

fn inspect<T: Scalar>(model: &AmgModel<T>, norm: &Normalizer, rec: &SampleRecord) -> CliResult<Inspection> {
    let s = norm.prepare::<T>(rec)?;
    let graphs = model.inspect_graphs(&s.positions, &s.inputs)?;
    Ok(Inspection { graphs, config: model.config.clone(), n: rec.n })
}

fn from_checkpoint<T: Scalar>(dir: &Path, rec: &SampleRecord) -> CliResult<Inspection> {
    let ck = checkpoint::load::<T>(dir)?;
    match &ck.net {
        Net::Amg(m) => inspect(m, &ck.normalizer, rec),
        Net::Mlp(_) => Err(CliError::Usage(format!("checkpoint {} holds the MLP baseline, which builds no graphs", dir.display()))),
    }
}

fn histogram(g: &GraphTopology) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for d in g.in_degrees() {
        *h.entry(d).or_insert(0) += 1;
    }
    h
}

fn write_files(out: &Path, rec: &SampleRecord, ins: &Inspection) -> CliResult<String> {
    let g = &ins.graphs;
    let graphs = [("local", &g.local), ("global", &g.global), ("physics", &g.physics)];

    let mut nodes = String::from("node");
    for j in 0..rec.d_pos {
        let _ = write!(nodes, ",{}", ["x", "y", "z"].get(j).map_or_else(|| format!("x{j}"), |s| s.to_string()));
    }
    for j in 0..rec.d_a {
        let _ = write!(nodes, ",{}", if rec.d_a == 1 { "a".to_string() } else { format!("a{j}") });
    }
    nodes.push_str(",hf,local_selected,global_selected\n");
    let mut in_local = vec![false; rec.n];
    let mut in_global = vec![false; rec.n];
    g.local_selected.iter().for_each(|&i| in_local[i] = true);
    g.global_selected.iter().for_each(|&i| in_global[i] = true);
    for i in 0..rec.n {
        let _ = write!(nodes, "{i}");
        for v in rec.positions[i * rec.d_pos..(i + 1) * rec.d_pos].iter().chain(&rec.inputs[i * rec.d_a..(i + 1) * rec.d_a]) {
            let _ = write!(nodes, ",{v:?}");
        }
        let _ = writeln!(nodes, ",{:?},{},{}", g.hf_indicator[i], u8::from(in_local[i]), u8::from(in_global[i]));
    }

    let mut selected = String::from("graph,rank,node\n");
    for (name, sel) in [("local", &g.local_selected), ("global", &g.global_selected)] {
        for (rank, i) in sel.iter().enumerate() {
            let _ = writeln!(selected, "{name},{rank},{i}");
        }
    }

    let mut edges = String::from("graph,source,target\n");
    let mut degrees = String::from("graph,in_degree,nodes\n");
    for (name, topo) in graphs {
        for (s, t) in topo.edges() {
            let _ = writeln!(edges, "{name},{s},{t}");
        }
        for (d, c) in histogram(topo) {
            let _ = writeln!(degrees, "{name},{d},{c}");
        }
    }

    let c = &ins.config;
    let local_n = c.local_n.min(ins.n);
    let local_k = c.local_k.min(local_n.saturating_sub(1));
    let bound = 2 * local_k + 1;
    let local_deg = g.local.in_degrees();
    let max_local = local_deg.iter().copied().max().unwrap_or(0);
    let over = local_deg.iter().filter(|&&d| d > bound).count();
    let m2 = c.physics_m * c.physics_m;
    let flat = g.hf_indicator.iter().all(|&v| v == 0.0);

    let mut summary = String::new();
    let _ = writeln!(summary, "sample {} ({} nodes), layer 0", rec.id, rec.n);
    let _ = writeln!(summary, "local    {} selected, k = {local_k}, {} edges", g.local_selected.len(), g.local.n_edges());
    let _ = writeln!(summary, "global   {} selected, k = {}, {} edges", g.global_selected.len(), c.global_k, g.global.n_edges());
    let _ = writeln!(
        summary,
        "physics  M = {}, {} edges (M^2 = {m2}: {})",
        c.physics_m,
        g.physics.n_edges(),
        if g.physics.n_edges() == m2 { "ok" } else { "MISMATCH" }
    );
    let _ = writeln!(
        summary,
        "local in-degree max {max_local}, bound 2k+1 = {bound}: {}",
        if over == 0 { "holds".to_string() } else { format!("exceeded at {over} nodes (kNN hubs gain reverse edges)") }
    );
    let min_deg = graphs.iter().map(|(_, t)| t.in_degrees().into_iter().min().unwrap_or(0)).min().unwrap_or(0);
    let _ = writeln!(summary, "min in-degree over all graphs {min_deg}");
    if flat {
        let _ = writeln!(summary, "H_F is zero everywhere: local selection follows node index order");
    }

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (name, body) in
        [("nodes.csv", &nodes), ("selected.csv", &selected), ("edges.csv", &edges), ("degrees.csv", &degrees), ("summary.txt", &summary)]
    {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
    }
    Ok(summary)
}

pub fn run(a: InspectArgs) -> CliResult {
    let split: Split = a.split.parse()?;
    let manifest = read_manifest(&a.data).map_err(|e| CliError::Usage(format!("cannot read dataset {}: {e}", a.data.display())))?;
    let records = read_split(&a.data, &manifest, split)?;
    let rec = records
        .get(a.index)
        .ok_or_else(|| CliError::Usage(format!("index {} outside the {} split ({} samples)", a.index, split.name(), records.len())))?;

    let (ins, mut cfg) = match &a.checkpoint {
        Some(dir) => {
            let ck = checkpoint::read_manifest(dir)?;
            let precision = Precision::parse(&ck.precision)?;
            let ins = match precision {
                Precision::F32 => from_checkpoint::<f32>(dir, rec)?,
                Precision::F64 => from_checkpoint::<f64>(dir, rec)?,
            };
            let mut cfg = RunConfig { precision, train: ck.train.clone(), ..RunConfig::default() };
            cfg.set_spec(&ck.model);
            (ins, cfg)
        }
        None => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            if let Some(s) = a.common.seed {
                cfg.set_seed(s);
            }
            cfg.model_kind = ModelKind::Amg;
            cfg.set_dims((manifest.d_pos, manifest.d_a, manifest.d_u));
            // normalise like training would: statistics of the train split
            let stats = if split == Split::Train { records.clone() } else { read_split(&a.data, &manifest, Split::Train)? };
            let norm = Normalizer::fit(if stats.is_empty() { std::slice::from_ref(rec) } else { &stats })?;
            let ins = match cfg.precision {
                Precision::F32 => inspect(&AmgModel::<f32>::new(cfg.model.clone())?, &norm, rec)?,
                Precision::F64 => inspect(&AmgModel::<f64>::new(cfg.model.clone())?, &norm, rec)?,
            };
            (ins, cfg)
        }
    };
    let summary = write_files(&a.out, rec, &ins)?;
    cfg.data = manifest.gen_config();
    cfg.write(&a.out)?;
    print!("{summary}");
    Ok(())
}
