//! The eight subcommand bodies and shared stage plumbing.

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::json;

use netpart_core::clustering::{hierarchical_partition, spectral_partition, ClusteringError};
use netpart_core::graph::{build_graph, RoadGraph};
use netpart_core::ingest::{assemble_all, parse_records, DailySeries, SpeedRecord, STANDARD_DAY_LEN};
use netpart_core::metrics;
use netpart_core::neuralnet::{
    load_model, save_model, train, AutoencoderModel, NeuralNetError, Tensor, TrainConfig,
};
use netpart_core::pipeline::{
    annotate_geojson, encode_dump, features_from_dump, mean_feature_table,
    mean_series_table, Method, MethodReport, PartitionFile, PipelineError,
};
use netpart_core::synth::{generate, SynthScenario};

use crate::artifacts::{self as art};
use crate::{CliError, Command, InputArgs, OutArgs, ThreadArgs};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest { input, out } => cmd_ingest(&input, &out),
        Command::Encode { input, out, paa } => cmd_encode(&input, &out, paa),
        Command::Train {
            out,
            epochs,
            batch,
            lr,
            seed,
            threads,
        } => {
            configure_threads(&threads)?;
            cmd_train(&out, epochs, batch, lr, seed)
        }
        Command::Features { out, date, threads } => {
            configure_threads(&threads)?;
            cmd_features(&out, &date)
        }
        Command::Partition {
            input,
            out,
            method,
            k,
            paa,
            geometry,
            threads,
        } => {
            configure_threads(&threads)?;
            cmd_partition(&input, &out, &method, &k, paa, geometry.as_deref())
        }
        Command::Evaluate {
            input,
            out,
            method,
            k,
            threads,
        } => {
            configure_threads(&threads)?;
            cmd_evaluate(&input, &out, method.as_deref(), k.as_deref())
        }
        Command::Synth { scenario, out } => cmd_synth(&scenario, &out),
        Command::Compare { out } => cmd_compare(&out),
    }
}

fn configure_threads(threads: &ThreadArgs) -> Result<(), CliError> {
    let Some(n) = threads.threads else {
        return Ok(());
    };
    if n == 0 {
        return Err(CliError::Input("--threads must be at least 1".to_string()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("thread pool: {e}")))
}

fn from_neuralnet(e: NeuralNetError) -> CliError {
    match e {
        NeuralNetError::NonFiniteLoss { .. } => CliError::Divergence(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

fn from_clustering(e: ClusteringError) -> CliError {
    match e {
        ClusteringError::KTooSmall { .. } | ClusteringError::KTooLarge { .. } => {
            CliError::InfeasibleK(e.to_string())
        }
        _ => CliError::Input(e.to_string()),
    }
}

fn from_pipeline(e: PipelineError) -> CliError {
    match e {
        PipelineError::NeuralNet(inner) => from_neuralnet(inner),
        PipelineError::Clustering(inner) => from_clustering(inner),
        _ => CliError::Input(e.to_string()),
    }
}

/// Records, parsed and filtered to the requested date, plus the edge pairs.
struct LoadedInput {
    records: Vec<SpeedRecord>,
    edges: Vec<(String, String)>,
}

fn load_input(input: &InputArgs) -> Result<LoadedInput, CliError> {
    let records_text = art::read_text(&input.records)?;
    let records = parse_records(&records_text, STANDARD_DAY_LEN, input.period_base)
        .map_err(|e| CliError::Input(format!("{}: {e}", input.records.display())))?;
    let date = art::parse_date_filter(&input.date)?;
    let records: Vec<SpeedRecord> = match date {
        None => records,
        Some(d) => records.into_iter().filter(|r| r.date == d).collect(),
    };
    if records.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no records match --date {}",
            input.records.display(),
            input.date
        )));
    }
    let edges_text = art::read_text(&input.edges)?;
    let edges = art::parse_edges(&edges_text, &input.edges)?;
    Ok(LoadedInput { records, edges })
}

fn assemble(records: &[SpeedRecord]) -> Result<Vec<DailySeries>, CliError> {
    assemble_all(records, STANDARD_DAY_LEN).map_err(|e| CliError::Input(e.to_string()))
}

/// Builds the adjacency graph over exactly `roads`, keeping only edges whose
/// endpoints both survive; edges into dropped or unknown roads are legal in
/// the file and simply ignored.
fn graph_over(roads: &[String], edges: &[(String, String)]) -> Result<RoadGraph, CliError> {
    let universe: BTreeSet<&str> = roads.iter().map(String::as_str).collect();
    let kept: Vec<(String, String)> = edges
        .iter()
        .filter(|(a, b)| universe.contains(a.as_str()) && universe.contains(b.as_str()))
        .cloned()
        .collect();
    build_graph(roads, &kept).map_err(|e| CliError::Input(e.to_string()))
}

fn distinct_roads(series: &[DailySeries]) -> Vec<String> {
    let set: BTreeSet<&str> = series.iter().map(|s| s.road_id.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

fn cmd_ingest(input: &InputArgs, out: &OutArgs) -> Result<(), CliError> {
    let loaded = load_input(input)?;
    let series = assemble(&loaded.records)?;
    let roads = distinct_roads(&series);
    let graph = graph_over(&roads, &loaded.edges)?;

    art::ensure_dir(&out.out)?;
    art::write_text(&out.out.join(art::SERIES_FILE), &art::write_series_csv(&series))?;
    let mut dates: Vec<String> = series
        .iter()
        .map(|s| s.date.format("%Y%m%d").to_string())
        .collect();
    dates.sort_unstable();
    dates.dedup();
    let edge_count: usize = (0..graph.len()).map(|i| graph.neighbors(i).len()).sum::<usize>() / 2;
    let summary = json!({
        "roads": roads.len(),
        "edges": edge_count,
        "components": graph.component_count(),
        "dates": dates,
        "day_len": STANDARD_DAY_LEN,
    });
    art::write_json(&out.out.join(art::NETWORK_FILE), &summary)
}

fn cmd_encode(input: &InputArgs, out: &OutArgs, paa: Option<usize>) -> Result<(), CliError> {
    let loaded = load_input(input)?;
    let series = assemble(&loaded.records)?;
    for road in distinct_roads(&series) {
        art::check_filename_safe(&road)?;
    }
    let dump = encode_dump(&series, paa).map_err(from_pipeline)?;

    let gaf_dir = out.out.join(art::GAF_DIR);
    art::ensure_dir(&gaf_dir)?;
    for e in &dump.gafs {
        let path = gaf_dir.join(art::gaf_filename(&e.road_id, e.date));
        art::write_binary(&path, &e.gaf.to_bytes())?;
    }
    let mut exclusions = dump.excluded_roads.join("\n");
    if !exclusions.is_empty() {
        exclusions.push('\n');
    }
    art::write_text(&out.out.join(art::EXCLUSIONS_FILE), &exclusions)
}

fn cmd_train(
    out: &OutArgs,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<(), CliError> {
    let gafs = art::load_gaf_dir(&out.out.join(art::GAF_DIR), None)?;
    let size = gafs[0].gaf.size();
    for e in &gafs {
        if e.gaf.size() != size {
            return Err(CliError::Input(format!(
                "GAF sizes differ: {} is {}x{}, expected {size}x{size}",
                art::gaf_filename(&e.road_id, e.date),
                e.gaf.size(),
                e.gaf.size()
            )));
        }
    }
    let dataset: Vec<Tensor> = gafs.iter().map(|e| Tensor::from_gaf(&e.gaf)).collect();
    let mut model = AutoencoderModel::new(size, seed).map_err(from_neuralnet)?;
    let config = TrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        seed,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &dataset, &config).map_err(from_neuralnet)?;

    art::write_binary(&out.out.join(art::MODEL_FILE), &save_model(&model))?;
    let mut loss_csv = String::from("epoch,loss\n");
    for (i, loss) in trace.iter().enumerate() {
        loss_csv.push_str(&format!("{},{loss}\n", i + 1));
    }
    art::write_text(&out.out.join(art::LOSS_FILE), &loss_csv)
}

fn cmd_features(out: &OutArgs, date: &str) -> Result<(), CliError> {
    let date = art::parse_date_filter(date)?;
    let gafs = art::load_gaf_dir(&out.out.join(art::GAF_DIR), date)?;
    let model_path = out.out.join(art::MODEL_FILE);
    let model = load_model(&art::read_binary(&model_path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", model_path.display())))?;
    let mut features = features_from_dump(&model, &gafs).map_err(from_pipeline)?;
    features.sort_by(|a, b| (&a.road_id, a.date).cmp(&(&b.road_id, b.date)));
    art::write_text(
        &out.out.join(art::FEATURES_FILE),
        &art::write_features_csv(&features),
    )
}

fn partition_inputs(
    input: &InputArgs,
    out: &OutArgs,
    method: Method,
    paa: Option<usize>,
) -> Result<(netpart_core::clustering::FeatureTable, RoadGraph), CliError> {
    let table = match method {
        Method::AeHier => {
            let path = out.out.join(art::FEATURES_FILE);
            let rows = art::parse_features_csv(&art::read_text(&path)?, &path)?;
            let date = art::parse_date_filter(&input.date)?;
            let rows: Vec<_> = match date {
                None => rows,
                Some(d) => rows.into_iter().filter(|f| f.date == d).collect(),
            };
            mean_feature_table(&rows).map_err(from_pipeline)?
        }
        Method::RawHier => {
            let series = assemble(&load_input(input)?.records)?;
            mean_series_table(&series, paa).map_err(from_pipeline)?
        }
        Method::Spectral => {
            let series = assemble(&load_input(input)?.records)?;
            mean_series_table(&series, None).map_err(from_pipeline)?
        }
    };
    let roads: Vec<String> = table.roads().map(str::to_string).collect();
    let edges_text = art::read_text(&input.edges)?;
    let edges = art::parse_edges(&edges_text, &input.edges)?;
    let graph = graph_over(&roads, &edges)?;
    Ok((table, graph))
}

fn cmd_partition(
    input: &InputArgs,
    out: &OutArgs,
    method: &str,
    k_selector: &str,
    paa: Option<usize>,
    geometry: Option<&Path>,
) -> Result<(), CliError> {
    let method = art::parse_method(method)?;
    let (k_lo, k_hi) = art::parse_k_selector(k_selector)?;
    let (table, graph) = partition_inputs(input, out, method, paa)?;
    let geometry = geometry.map(art::read_text).transpose()?;

    art::ensure_dir(&out.out)?;
    for k in k_lo..=k_hi {
        let clusters = match method {
            Method::AeHier | Method::RawHier => {
                let (clusters, _) =
                    hierarchical_partition(&graph, &table, k).map_err(from_clustering)?;
                for members in clusters.member_indices(&graph).expect("clusters cover graph") {
                    assert_eq!(
                        graph.connected_components(&members).len(),
                        1,
                        "cluster not connected"
                    );
                }
                clusters
            }
            Method::Spectral => spectral_partition(&graph, &table, k).map_err(from_clustering)?,
        };
        let file = PartitionFile::new(method, &clusters);
        art::write_json(&out.out.join(art::partition_filename(method, k)), &file)?;
        if let Some(text) = &geometry {
            let annotated = annotate_geojson(text, &file).map_err(from_pipeline)?;
            art::write_text(
                &out.out.join(art::geojson_filename(method, k)),
                &format!("{annotated}\n"),
            )?;
        }
    }
    Ok(())
}

fn cmd_evaluate(
    input: &InputArgs,
    out: &OutArgs,
    method: Option<&str>,
    k_selector: Option<&str>,
) -> Result<(), CliError> {
    let method = method.map(art::parse_method).transpose()?;
    let k_range = k_selector.map(art::parse_k_selector).transpose()?;

    let partitions: Vec<PartitionFile> = art::load_partitions(&out.out)?
        .into_iter()
        .filter(|p| method.map_or(true, |m| p.method == m))
        .filter(|p| k_range.map_or(true, |(lo, hi)| (lo..=hi).contains(&p.k)))
        .collect();
    if partitions.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no partition files match; run partition first",
            out.out.display()
        )));
    }

    let loaded = load_input(input)?;
    let series = assemble(&loaded.records)?;

    let mut reports = Vec::with_capacity(partitions.len());
    for partition in &partitions {
        let roads: Vec<String> = partition.assignment.keys().cloned().collect();
        let graph = graph_over(&roads, &loaded.edges)?;
        let members: BTreeSet<&str> = roads.iter().map(String::as_str).collect();
        let covered: Vec<DailySeries> = series
            .iter()
            .filter(|s| members.contains(s.road_id.as_str()))
            .cloned()
            .collect();
        let table = match mean_series_table(&covered, None) {
            Err(PipelineError::EmptyInput) => {
                return Err(CliError::Mismatch(format!(
                    "no series cover the roads of partition {}_k{}",
                    partition.method, partition.k
                )))
            }
            other => other.map_err(from_pipeline)?,
        };
        let clusters = partition.to_cluster_set().map_err(from_pipeline)?;
        let report = metrics::report(&clusters, &table, &graph)
            .map_err(|e| CliError::Mismatch(e.to_string()))?;
        let tagged = MethodReport::new(partition.method, report);
        art::write_json(
            &out.out.join(art::report_filename(partition.method, partition.k)),
            &tagged,
        )?;
        reports.push(tagged);
    }

    let (csv, _) = art::comparison_csv(&reports);
    art::write_text(&out.out.join(art::COMPARISON_FILE), &csv)
}

fn cmd_synth(scenario_path: &Path, out: &OutArgs) -> Result<(), CliError> {
    let text = art::read_text(scenario_path)?;
    let scenario: SynthScenario = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", scenario_path.display())))?;
    let result = generate(&scenario).map_err(|e| CliError::Input(e.to_string()))?;

    art::ensure_dir(&out.out)?;
    let records = art::records_from_series(&result.series, 10);
    art::write_text(
        &out.out.join(art::RECORDS_FILE),
        &netpart_core::ingest::write_records(&records),
    )?;

    let road_ids: Vec<&str> = result.series.iter().map(|s| s.road_id.as_str()).collect();
    let mut edges = Vec::new();
    for i in 0..result.graph.len() {
        for &j in result.graph.neighbors(i) {
            if j > i {
                edges.push((road_ids[i].to_string(), road_ids[j].to_string()));
            }
        }
    }
    art::write_text(&out.out.join(art::EDGES_FILE), &art::write_edges(&edges))?;

    let truth = json!({
        "k": result.truth.k(),
        "assignment": result.truth.assignment(),
        "tidal_pair": result.tidal_pair,
    });
    art::write_json(&out.out.join(art::TRUTH_FILE), &truth)
}

fn cmd_compare(out: &OutArgs) -> Result<(), CliError> {
    let reports = art::load_reports(&out.out)?;
    let (csv, pairs) = art::comparison_csv(&reports);
    if pairs == 0 {
        return Err(CliError::Input(format!(
            "{}: no report pairs share a k; run evaluate for at least two methods",
            out.out.display()
        )));
    }
    art::write_text(&out.out.join(art::COMPARISON_FILE), &csv)
}
