use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use q8llama::checkpoint::{write_fp32_checkpoint, Fp32Weights};
use q8llama::tokenizer::toy_tokenizer;
use q8llama::ModelConfig;
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
    config: ModelConfig,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let tok = toy_tokenizer();
        let config = ModelConfig {
            dim: 64,
            hidden_dim: 128,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            vocab_size: tok.vocab_size(),
            seq_len: 24,
        };
        let fp = Fp32Weights::random(&config, true, 5);
        std::fs::write(dir.path().join("model.bin"), write_fp32_checkpoint(&config, &fp).unwrap()).unwrap();
        std::fs::write(dir.path().join("tokenizer.bin"), tok.to_bytes()).unwrap();
        Fixture { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn q8llama<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_q8llama")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn kv(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{text}"))
        .parse()
        .unwrap()
}

fn assert_single_line_error(o: &Output, needle: &str) {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains(needle), "{err}");
}

/// Raw stdout: sampled byte tokens need not form valid UTF-8.
fn generate(f: &Fixture, model: &Path, extra: &[&str]) -> Vec<u8> {
    let mut args = vec!["generate".into(), model.to_path_buf(), f.path("tokenizer.bin")];
    args.extend(extra.iter().map(PathBuf::from));
    let o = q8llama(args);
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o.stdout
}

#[test]
fn quantize_reports_stats_within_the_bound() {
    let f = Fixture::new();
    let o = q8llama([
        "quantize".as_ref(),
        f.path("model.bin").as_os_str(),
        f.path("model.q80").as_os_str(),
        "--group-size".as_ref(),
        "8".as_ref(),
    ]);
    let out = stdout(&o);
    assert!(kv(&out, "max_abs_error") <= kv(&out, "max_scale") / 2.0);
    let bytes = std::fs::read(f.path("model.q80")).unwrap();
    assert_eq!(&bytes[..4], b"24ka");
}

#[test]
fn quantize_errors_are_one_line() {
    let f = Fixture::new();
    let o = q8llama(["quantize".as_ref(), f.path("missing.bin").as_os_str(), f.path("out").as_os_str()]);
    assert_single_line_error(&o, "missing.bin");
    let o = q8llama([
        "quantize".as_ref(),
        f.path("model.bin").as_os_str(),
        f.path("out").as_os_str(),
        "--group-size".as_ref(),
        "7".as_ref(),
    ]);
    assert_single_line_error(&o, "group size");
}

#[test]
fn generation_is_reproducible_and_greedy_ignores_seed() {
    let f = Fixture::new();
    let m = f.path("model.bin");
    let a = generate(&f, &m, &["--seed", "7", "--steps", "12"]);
    assert_eq!(a, generate(&f, &m, &["--seed", "7", "--steps", "12"]));
    let g1 = generate(&f, &m, &["--temperature", "0", "--seed", "1"]);
    let g2 = generate(&f, &m, &["--temperature", "0", "--seed", "2"]);
    assert_eq!(g1, g2);
}

#[test]
fn quantized_and_fp32_files_generate_the_same_text() {
    let f = Fixture::new();
    stdout(&q8llama([
        "quantize".as_ref(),
        f.path("model.bin").as_os_str(),
        f.path("model.q80").as_os_str(),
        "--group-size".as_ref(),
        "16".as_ref(),
    ]));
    let args = ["--seed", "3", "--group-size", "16"];
    assert_eq!(generate(&f, &f.path("model.bin"), &args), generate(&f, &f.path("model.q80"), &args));
}

#[test]
fn steps_past_the_context_are_capped() {
    let f = Fixture::new();
    let m = f.path("model.bin");
    let capped = generate(&f, &m, &["--seed", "9", "--steps", "1024"]);
    assert_eq!(capped, generate(&f, &m, &["--seed", "9", "--steps", &f.config.seq_len.to_string()]));
}

#[test]
fn prompt_is_echoed() {
    let f = Fixture::new();
    let out = generate(&f, &f.path("model.bin"), &["--prompt", "Once upon a time", "--seed", "1"]);
    assert!(out.starts_with(b"Once upon a time"), "{}", String::from_utf8_lossy(&out));
}

#[test]
fn perplexity_of_text_and_token_stream_agree() {
    let f = Fixture::new();
    let text = "Once upon a time there was a day and the time was.";
    std::fs::write(f.path("text.txt"), text).unwrap();
    let ids = toy_tokenizer().encode(text.as_bytes(), false, false);
    let raw: Vec<u8> = ids.iter().flat_map(|&t| (t as i32).to_le_bytes()).collect();
    std::fs::write(f.path("tokens.bin"), raw).unwrap();
    let run = |file: &str, extra: &[&str]| {
        let mut args: Vec<PathBuf> =
            vec!["perplexity".into(), f.path("model.bin"), f.path("tokenizer.bin"), f.path(file)];
        args.extend(["--format", "kv"].iter().chain(extra).map(PathBuf::from));
        stdout(&q8llama(args))
    };
    let a = run("text.txt", &[]);
    let b = run("tokens.bin", &["--pretokenized"]);
    assert_eq!(a, b);
    assert!(kv(&a, "ppl") >= 1.0);
    assert_eq!(kv(&a, "tokens") as usize, ids.len());
}

#[test]
fn estimate_defaults_reproduce_the_published_figures() {
    let out = stdout(&q8llama(["estimate", "--format", "kv"]));
    assert_eq!(kv(&out, "fpga.latency_ms"), 17.510);
    assert_eq!(kv(&out, "fpga.toks_per_s"), 57.11);
    assert_eq!(kv(&out, "fpga.mwh_per_token"), 0.0438);
    assert_eq!(kv(&out, "fpga_vs_cpu.energy_reduction_published"), 12.75);
    assert_eq!(kv(&out, "fpga_vs_gpu.energy_reduction_published"), 8.25);
    assert_eq!(kv(&out, "fpga_vs_cpu.speedup_published"), 2.46);
    assert_eq!(kv(&out, "fpga_vs_gpu.speedup_published"), 0.53);
}

#[test]
fn compose_mode_is_close_to_table_mode() {
    for tokens in ["256", "1024"] {
        let table = kv(&stdout(&q8llama(["estimate", "--format", "kv", "--tokens", tokens])), "fpga.latency_ms");
        let composed = kv(
            &stdout(&q8llama(["estimate", "--format", "kv", "--tokens", tokens, "--mode", "compose"])),
            "fpga.latency_ms",
        );
        assert!((composed - table).abs() / table < 0.10, "{composed} vs {table}");
    }
}

#[test]
fn estimate_reads_a_table_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cycles.txt");
    std::fs::write(&path, "# name best avg worst\nclock_period_ns 5\nforward 1000000 2000000 3000000\n").unwrap();
    let out = stdout(&q8llama([
        "estimate".as_ref(),
        "--format".as_ref(),
        "kv".as_ref(),
        "--table".as_ref(),
        path.as_os_str(),
    ]));
    assert_eq!(kv(&out, "fpga.latency_ms"), 10.0);

    std::fs::write(&path, "rmsnorm 1 1 1\n").unwrap();
    let o = q8llama(["estimate".as_ref(), "--table".as_ref(), path.as_os_str()]);
    assert_single_line_error(&o, "forward");
}

#[test]
fn unpublished_token_counts_need_explicit_baselines() {
    assert_single_line_error(&q8llama(["estimate", "--tokens", "512"]), "--power-cpu");
    let out = stdout(&q8llama([
        "estimate",
        "--format",
        "kv",
        "--tokens",
        "512",
        "--power-cpu",
        "40",
        "--latency-cpu",
        "45",
        "--power-gpu",
        "120",
        "--latency-gpu",
        "9",
    ]));
    assert_eq!(kv(&out, "cpu.power_w"), 40.0);
}
