use std::fmt::Write as _;
use std::io::Cursor;

use serde::{Deserialize, Serialize};

use quantsim::adjoint::{backprop_checkpointed, backprop_full, BackpropOptions};
use quantsim::bitpack::{struct_style_words, PackLayout, PackedBuffer};
use quantsim::quantizer::{
    optimality_probe, probe_table, validate as run_validation, Perturbation, QuantScheme, QuantityInput, SolveError,
    SolverRequest, ValidationConfig,
};
use quantsim::sims::{run, Differentiable, EvalKind, FinalEval, RunOptions, Simulator};

use crate::config::{Checkpointing, Project};
use crate::CliError;

const REFERENCE: &str = "reference.toml";
const REFERENCE_STATE: &str = "reference_state.bin";
const GRADIENTS: &str = "gradients.toml";
const SCHEME: &str = "scheme.toml";
const VALIDATION: &str = "validation.csv";
const PROBE: &str = "probe.csv";
const PACK_BENCH: &str = "pack_bench.toml";

#[derive(Serialize, Deserialize)]
struct ReferenceFile {
    config_hash: String,
    steps: usize,
    evaluation: EvalKind,
    z: f64,
    clamped: u64,
    safety_factor: f64,
    #[serde(default)]
    warnings: Vec<String>,
    #[serde(rename = "quantity")]
    quantities: Vec<RangeRow>,
}

#[derive(Serialize, Deserialize)]
struct RangeRow {
    name: String,
    element_count: usize,
    max_abs: f64,
    range: f64,
}

#[derive(Serialize, Deserialize)]
struct GradientsFile {
    config_hash: String,
    z: f64,
    #[serde(rename = "quantity")]
    quantities: Vec<GradientRow>,
}

#[derive(Serialize, Deserialize)]
struct GradientRow {
    name: String,
    element_count: usize,
    gradient: f64,
}

fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("artifact serializes")
}

fn parse<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| CliError::Invalid(format!("{file}: {e}")))
}

fn load_scheme(p: &Project) -> Result<QuantScheme, CliError> {
    let scheme = QuantScheme::from_toml(&p.read_artifact(SCHEME)?).map_err(|e| CliError::Invalid(format!("{SCHEME}: {e}")))?;
    p.check_hash(SCHEME, &scheme.config_hash)?;
    Ok(scheme)
}

fn sim_error(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

pub fn reference(p: &Project) -> Result<(), CliError> {
    let sc = &p.scene_config;
    let options = RunOptions {
        safety_factor: p.config.safety_factor,
        min_range: p.config.min_range,
        ..Default::default()
    };
    let report = run(&p.scene, sc.steps, sc.evaluation, &options).map_err(sim_error)?;
    let counts = p.scene.quantities();
    let file = ReferenceFile {
        config_hash: p.hash.clone(),
        steps: sc.steps,
        evaluation: sc.evaluation,
        z: report.z,
        clamped: report.clamped,
        safety_factor: p.config.safety_factor,
        warnings: report.warnings.clone(),
        quantities: report
            .ranges
            .iter()
            .zip(counts)
            .map(|((name, tracker), q)| RangeRow {
                name: name.clone(),
                element_count: q.count,
                max_abs: tracker.max_abs(),
                range: tracker.range(),
            })
            .collect(),
    };
    p.write(REFERENCE, to_toml(&file).as_bytes())?;
    let state: Vec<u8> = report.final_state.iter().flat_map(|v| v.to_le_bytes()).collect();
    p.write(REFERENCE_STATE, &state)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("z = {:e} after {} steps; artifacts in {}", report.z, sc.steps, p.out_dir.display());
    Ok(())
}

pub fn gradients(p: &Project) -> Result<(), CliError> {
    let reference: ReferenceFile = parse(REFERENCE, &p.read_artifact(REFERENCE)?)?;
    p.check_hash(REFERENCE, &reference.config_hash)?;
    let sc = &p.scene_config;
    let steps = Differentiable(&p.scene);
    let objective = FinalEval {
        sim: &p.scene,
        kind: sc.evaluation,
    };
    let initial = p.scene.initial_state();
    let options = BackpropOptions::default();
    let out = match p.config.checkpointing {
        Checkpointing::Full => backprop_full(&steps, &objective, &initial, sc.steps, &options),
        Checkpointing::Bisection => backprop_checkpointed(&steps, &objective, &initial, sc.steps, &options),
    }
    .map_err(sim_error)?;
    let file = GradientsFile {
        config_hash: p.hash.clone(),
        z: out.z,
        quantities: out
            .tally
            .names
            .iter()
            .zip(&out.tally.counts)
            .zip(&out.tally.sums)
            .map(|((name, &count), &g)| GradientRow {
                name: name.clone(),
                element_count: count,
                gradient: g,
            })
            .collect(),
    };
    p.write(GRADIENTS, to_toml(&file).as_bytes())?;
    println!(
        "gradient tally over {} steps: {} forward steps, at most {} states resident",
        sc.steps, out.stats.forward_steps, out.stats.peak_resident
    );
    Ok(())
}

pub fn solve(p: &Project) -> Result<(), CliError> {
    let reference: ReferenceFile = parse(REFERENCE, &p.read_artifact(REFERENCE)?)?;
    p.check_hash(REFERENCE, &reference.config_hash)?;
    let grads: GradientsFile = parse(GRADIENTS, &p.read_artifact(GRADIENTS)?)?;
    p.check_hash(GRADIENTS, &grads.config_hash)?;

    let quantities = p
        .quantized()
        .into_iter()
        .map(|name| {
            let r = reference.quantities.iter().find(|r| r.name == name);
            let g = grads.quantities.iter().find(|g| g.name == name);
            match (r, g) {
                (Some(r), Some(g)) => Ok(QuantityInput {
                    name,
                    count: g.element_count,
                    range: r.range,
                    gradient: g.gradient,
                }),
                _ => Err(CliError::Invalid(format!("artifacts lack quantity `{name}`"))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut request = SolverRequest::new(p.config.solve_mode(), reference.z, quantities);
    request.reference_bits = p.config.reference_bits;
    request.z_floor = p.config.z_floor;
    let mut scheme = quantsim::quantizer::solve(&request).map_err(|e| match e {
        SolveError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
        SolveError::Invalid(_) => CliError::Invalid(e.to_string()),
    })?;
    scheme.config_hash = p.hash.clone();
    scheme.seed = p.seed();
    scheme.safety_factor = p.config.safety_factor;
    p.write(SCHEME, scheme.to_toml().as_bytes())?;
    for w in &scheme.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} quantities, {} fraction bits, compression rate {:.4}, predicted sigma {:e}",
        scheme.entries.len(),
        scheme.fraction_bits_total(),
        scheme.compression_rate(),
        scheme.sigma_pred()
    );
    Ok(())
}

fn validation_config(p: &Project) -> ValidationConfig {
    ValidationConfig {
        trials: p.config.trials,
        seed: p.seed(),
        tolerance: p.config.error_tolerance,
        dither: p.config.dither,
        z_floor: p.config.z_floor,
    }
}

pub fn validate(p: &Project) -> Result<(), CliError> {
    let scheme = load_scheme(p)?;
    let sc = &p.scene_config;
    let report = run_validation(&p.scene, sc.steps, sc.evaluation, &scheme, &validation_config(p)).map_err(sim_error)?;
    let mut out = format!("# config_hash = {}\n# dither = {}\n", p.hash, p.config.dither);
    out.push_str(&report.to_csv());
    p.write(VALIDATION, out.as_bytes())?;

    let trials = report.trials.len();
    let required = (p.config.success_threshold * trials as f64).ceil() as usize;
    println!(
        "{}/{} trials within 3 x {} of z_ref; std {:e}, predicted {:e}; {} non-finite",
        report.successes(),
        trials,
        report.tolerance,
        report.std(),
        report.sigma_pred,
        report.failed_non_finite()
    );
    if report.successes() < required {
        return Err(CliError::ThresholdUnmet {
            successes: report.successes(),
            trials,
            required,
        });
    }
    Ok(())
}

pub fn probe(p: &Project) -> Result<(), CliError> {
    let scheme = load_scheme(p)?;
    let sc = &p.scene_config;
    let pc = &p.config.probe;
    let mut perturbations = vec![
        Perturbation::Unchanged,
        Perturbation::RemoveAll(pc.remove_bits),
        Perturbation::RemoveRandomHalf {
            bits: pc.remove_bits,
            seed: pc.half_seed,
        },
    ];
    for [from, to] in &pc.moves {
        perturbations.push(Perturbation::Move {
            from: from.clone(),
            to: to.clone(),
            bits: 1,
        });
    }
    perturbations.push(Perturbation::AddAll(pc.add_bits));
    let rows = optimality_probe(&p.scene, sc.steps, sc.evaluation, &scheme, &perturbations, &validation_config(p))
        .map_err(sim_error)?;
    let table = probe_table(&rows);
    p.write(PROBE, format!("# config_hash = {}\n{table}", p.hash).as_bytes())?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct PackBenchFile {
    config_hash: String,
    quantized_bits: u64,
    reference_bits: u64,
    #[serde(rename = "group")]
    groups: Vec<PackGroup>,
}

#[derive(Serialize)]
struct PackGroup {
    element_count: usize,
    fields: Vec<String>,
    widths: Vec<u32>,
    bits_per_element: u64,
    words32_per_element: usize,
    struct_words32_per_element: usize,
    words64_per_element: usize,
    struct_words64_per_element: usize,
    dump_bytes: usize,
    round_trip: bool,
}

/// Pack the quantized final state of one trial per element group, dump and
/// restore it, and compare footprints with word-aligned struct packing.
pub fn pack_bench(p: &Project) -> Result<(), CliError> {
    let scheme = load_scheme(p)?;
    let sc = &p.scene_config;
    let options = RunOptions {
        scheme: Some(&scheme),
        dither: p.config.dither,
        seed: p.seed(),
        ..Default::default()
    };
    let report = run(&p.scene, sc.steps, sc.evaluation, &options).map_err(sim_error)?;
    let quantities = p.scene.quantities();

    let mut counts: Vec<usize> = Vec::new();
    for e in &scheme.entries {
        if !counts.contains(&e.count) {
            counts.push(e.count);
        }
    }
    let mut groups = Vec::new();
    let mut all_ok = true;
    for count in counts {
        let entries: Vec<_> = scheme.entries.iter().filter(|e| e.count == count).collect();
        let widths: Vec<u32> = entries.iter().map(|e| e.fraction_bits + 1).collect();
        let named: Vec<(&str, u32)> = entries.iter().map(|e| e.name.as_str()).zip(widths.iter().copied()).collect();
        let plan = |bits| PackLayout::plan(&named, bits).map_err(sim_error);
        let layout32 = plan(32);
        let layout64 = plan(64)?;
        let mut buf = PackedBuffer::new(layout64.clone(), count);
        let mut codes = Vec::with_capacity(entries.len() * count);
        for (f, e) in entries.iter().enumerate() {
            let spec = e.spec().map_err(sim_error)?;
            let q = quantities.iter().find(|q| q.name == e.name).expect("run checked names");
            for i in 0..count {
                let code = spec.encode(report.final_state[q.offset + i]).map_err(sim_error)?.value;
                buf.store_signed(i, f, code).map_err(sim_error)?;
                codes.push(code);
            }
        }
        let mut dump = Vec::new();
        buf.write_to(&mut dump).map_err(sim_error)?;
        let restored = PackedBuffer::read_from(Cursor::new(&dump)).map_err(sim_error)?;
        let mut ok = restored.words() == buf.words();
        for f in 0..entries.len() {
            for i in 0..count {
                ok &= restored.load_signed(i, f).map_err(sim_error)? == codes[f * count + i];
            }
        }
        all_ok &= ok;
        let fields: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
        groups.push(PackGroup {
            element_count: count,
            bits_per_element: layout64.total_bits(),
            // widths above 32 bits cannot live in 32-bit words
            words32_per_element: layout32.as_ref().map(|l| l.words_needed()).unwrap_or(0),
            struct_words32_per_element: if widths.iter().all(|&w| w <= 32) {
                struct_style_words(&widths, 32)
            } else {
                0
            },
            words64_per_element: layout64.words_needed(),
            struct_words64_per_element: struct_style_words(&widths, 64),
            dump_bytes: dump.len(),
            round_trip: ok,
            fields,
            widths,
        });
    }
    let file = PackBenchFile {
        config_hash: p.hash.clone(),
        quantized_bits: scheme.physical_bits_total(),
        reference_bits: scheme.reference_memory(),
        groups,
    };
    p.write(PACK_BENCH, to_toml(&file).as_bytes())?;
    let mut summary = String::new();
    for g in &file.groups {
        let _ = writeln!(
            summary,
            "{} elements: {} bits packed into {} x 64-bit words (struct-style {}), round trip {}",
            g.element_count,
            g.bits_per_element,
            g.words64_per_element,
            g.struct_words64_per_element,
            if g.round_trip { "ok" } else { "FAILED" }
        );
    }
    print!("{summary}");
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Invalid("bit pack round trip failed".into()))
    }
}
