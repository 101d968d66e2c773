//! End-to-end acceptance checks. Prints one PASS or FAIL line per
//! criterion and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{fixtures, random_gc_trial, registry, Sandbox, SYSTEM};
use fpm::core::derivation::{Builder, BuiltinTag, Derivation, DerivationInput, DerivationSpec};
use fpm::core::{PathTag, StorePath};
use fpm::engine::{scan_tree, BuildStatus};
use fpm::packages::PackageRegistry;
use fpm::profiles::{Action, Faults, Outcome, Profile};
use fpm::Error;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use walkdir::WalkDir;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("hello end to end", hello_end_to_end),
        ("determinism fuzz", determinism_fuzz),
        ("transaction semantics", transactions),
        ("gc safety and completeness", gc_and_scanner),
        ("purity audit", purity_audit),
        ("phase mechanics", phase_mechanics),
        ("instantiation performance", instantiation_performance),
        ("serialization golden vectors", serialization),
        ("fixture registry builds and installs", registry_builds_and_installs),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (title, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .map_or_else(|| "panicked".to_string(), |m| format!("panicked: {m}"))),
        };
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {} {title} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {} {title} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

fn hello_end_to_end() -> Check {
    let start = Instant::now();
    let sb = Sandbox::new();
    let (drv, d) = ok(sb.store.derivation(sb.shell_spec("example-1.0", "echo hello > $out")), "instantiate")?;
    let engine = sb.engine();
    let first = ok(engine.build_derivations(std::slice::from_ref(&drv)), "build")?;
    ensure!(first[0].status == BuildStatus::Built, "first build was {:?}", first[0].status);
    let out = sb.store.real_path(d.output());
    ensure!(out.is_file(), "output is not a single file");
    let bytes = ok(fs::read(&out), "read output")?;
    ensure!(bytes == b"hello\n", "output holds {:?}", String::from_utf8_lossy(&bytes));

    let again = sb.engine();
    let second = ok(again.build_derivations(&[drv]), "rebuild")?;
    ensure!(second[0].status == BuildStatus::Cached, "second build was {:?}", second[0].status);
    ensure!(again.builder_launches() == 0, "{} builders ran on the second build", again.builder_launches());
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("output {:?}, second build cached with 0 builder runs", "hello\n"))
}

/// Fixed pools the random derivations draw their inputs and sources from.
struct Pools {
    bash: StorePath,
    sources: Vec<StorePath>,
    inputs: Vec<StorePath>,
}

fn pools(sb: &Sandbox) -> Result<Pools, String> {
    let bash = sb.static_bash();
    let mut sources = Vec::new();
    for i in 0..5 {
        sources
            .push(ok(sb.store.add_text(PathTag::Source, &format!("src{i}"), &format!("source {i}\n"), &[]), "source")?);
    }
    let mut inputs = Vec::new();
    for i in 0..5 {
        let mut spec = DerivationSpec::new(format!("dep{i}"), SYSTEM, Builder::Builtin(BuiltinTag::WriteText));
        spec.env = vec![("text".into(), format!("dep {i}"))];
        inputs.push(ok(sb.store.derivation(spec), "input")?.0);
    }
    Ok(Pools { bash, sources, inputs })
}

fn random_word(rng: &mut StdRng) -> String {
    let len = rng.gen_range(1..8);
    (0..len).map(|_| *b"abcdefghijklmnopqrstuvwxyz0123456789-_ .\"\\\n".choose(rng).unwrap() as char).collect()
}

fn random_spec(rng: &mut StdRng, p: &Pools, i: usize) -> DerivationSpec {
    let builder = match rng.gen_range(0..3) {
        0 => Builder::Builtin(BuiltinTag::WriteText),
        1 => Builder::Builtin(BuiltinTag::UnpackSeed),
        _ => Builder::Path(p.bash.clone()),
    };
    let system = ["x86_64-linux", "i686-linux", "armhf-linux"].choose(rng).unwrap();
    let mut spec = DerivationSpec::new(format!("pkg{i}-{}", rng.gen_range(0..100)), *system, builder);
    spec.args = (0..rng.gen_range(0..4)).map(|_| random_word(rng)).collect();
    spec.env = (0..rng.gen_range(0..4)).map(|k| (format!("K{k}"), random_word(rng))).collect();
    for (j, d) in p.inputs.iter().enumerate() {
        if rng.gen_bool(0.3) {
            spec.inputs.push(DerivationInput::new(format!("in{j}"), d.clone()));
        }
    }
    spec.sources.push(p.bash.clone());
    spec.sources.extend(p.sources.iter().filter(|_| rng.gen_bool(0.3)).cloned());
    spec
}

/// Seven variants of `spec`, each differing in exactly one field.
fn mutations(spec: &DerivationSpec, p: &Pools) -> Vec<(&'static str, DerivationSpec)> {
    let mut out = Vec::new();
    let mut m = spec.clone();
    m.name.push('x');
    out.push(("name", m));
    let mut m = spec.clone();
    m.system = if spec.system == "x86_64-linux" { "mips64el-linux".into() } else { "x86_64-linux".into() };
    out.push(("system", m));
    let mut m = spec.clone();
    m.builder = match &spec.builder {
        Builder::Builtin(BuiltinTag::WriteText) => Builder::Builtin(BuiltinTag::UnpackSeed),
        _ => Builder::Builtin(BuiltinTag::WriteText),
    };
    out.push(("builder", m));
    let mut m = spec.clone();
    m.args.push("extra".into());
    out.push(("args", m));
    let mut m = spec.clone();
    match m.env.first_mut() {
        Some((_, v)) => v.push('!'),
        None => m.env.push(("K".into(), String::new())),
    }
    out.push(("env", m));
    let mut m = spec.clone();
    if m.inputs.pop().is_none() {
        m.inputs.push(DerivationInput::new("in0", p.inputs[0].clone()));
    }
    out.push(("inputs", m));
    let mut m = spec.clone();
    match p.sources.iter().find(|s| !m.sources.contains(s)) {
        Some(s) => m.sources.push(s.clone()),
        None => {
            m.sources.pop();
        }
    }
    out.push(("sources", m));
    out
}

fn determinism_fuzz() -> Check {
    let sb = Sandbox::new();
    let p = pools(&sb)?;
    let mut rng = StdRng::seed_from_u64(2);
    let mut mutated = 0;
    for i in 0..200 {
        let spec = random_spec(&mut rng, &p, i);
        let (drv1, d1) = ok(sb.store.derivation(spec.clone()), "instantiate")?;
        let (drv2, d2) = ok(sb.store.derivation(spec.clone()), "instantiate again")?;
        ensure!(drv1 == drv2 && d1.output() == d2.output(), "derivation {i} is not deterministic");
        // The pure computation agrees with what the store recorded.
        let pure = ok(Derivation::new(sb.store.root_str(), spec.clone()), "compute")?;
        ensure!(pure.drv_path() == drv1 && pure.output() == d1.output(), "derivation {i}: store and pure paths differ");
        for (field, m) in mutations(&spec, &p) {
            let (drv_m, dm) = ok(sb.store.derivation(m), field)?;
            ensure!(drv_m != drv1, "derivation {i}: changing {field} kept the drv path");
            ensure!(dm.output() != d1.output(), "derivation {i}: changing {field} kept the output path");
            mutated += 1;
        }
    }
    Ok(format!("200 derivations stable, {mutated} single-field mutations all changed both paths"))
}

fn manifest_text(p: &Profile) -> Result<String, String> {
    let n = ok(p.current(), "current generation")?;
    if n == 0 {
        return Ok(String::new());
    }
    ok(fs::read_to_string(p.generation_dir(n).join("manifest")), "read manifest")
}

fn transactions() -> Check {
    let sb = Sandbox::new();
    let c = sb.compiler(registry("registry"));
    let e = sb.engine();
    let p = ok(Profile::open(sb.store.clone(), &sb.state(), "alice"), "open profile")?;
    ok(p.transact(&c, &e, &[Action::Install("bigloo".into())]), "install bigloo")?;
    let before = manifest_text(&p)?;
    let actions = [Action::Install("guile".into()), Action::Remove("bigloo".into())];
    ok(p.transact(&c, &e, &actions), "install guile, remove bigloo")?;
    let names: Vec<String> = ok(p.manifest(), "manifest")?.entries().iter().map(|e| e.name.clone()).collect();
    ensure!(names == ["guile"], "after the transaction the profile holds {names:?}");
    ok(p.roll_back(), "roll back")?;
    ensure!(manifest_text(&p)? == before, "roll-back did not restore the manifest byte for byte");
    let m = ok(p.manifest(), "manifest")?;
    ensure!(m.len() == 1 && m.contains("bigloo"), "roll-back left {m:?}");

    // Count the materialization steps of one transaction, then fail at each.
    let setup = |user: &str, faults: Faults| -> Result<Profile, String> {
        let p = ok(Profile::open(sb.store.clone(), &sb.state(), user), "open profile")?;
        ok(p.transact(&c, &e, &[Action::Install("bigloo".into())]), "install bigloo")?;
        Ok(p.with_faults(faults))
    };
    let probe = setup("probe", Faults::default())?;
    ok(probe.transact(&c, &e, &actions), "probe transaction")?;
    let steps = probe.faults().steps();
    ensure!(steps >= 10, "only {steps} injection points");
    for k in 0..steps {
        let p = setup(&format!("fault{k}"), Faults::fail_at(k))?;
        let link_before = ok(fs::read_link(p.link()), "read link")?;
        let r = p.transact(&c, &e, &actions);
        ensure!(matches!(r, Err(Error::FaultInjected(_))), "step {k}: transaction returned {r:?}");
        let link_after = ok(fs::read_link(p.link()), "read link")?;
        ensure!(link_after == link_before, "step {k}: the link moved");
        ensure!(ok(p.generations(), "generations")? == [1], "step {k}: a partial generation was left");
        ensure!(p.generation_dir(1).join("manifest").is_file(), "step {k}: link target incomplete");
        let leftovers: Vec<String> = ok(fs::read_dir(p.dir()), "list profile")?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.starts_with(".generation") || n.starts_with(".profile"))
            .collect();
        ensure!(leftovers.is_empty(), "step {k}: left {leftovers:?}");
    }
    Ok(format!("roll-back restored {{bigloo}}; {steps} injection points all left the link on a complete generation"))
}

fn gc_and_scanner() -> Check {
    let mut rng = StdRng::seed_from_u64(4);
    for trial in 0..100 {
        random_gc_trial(&mut rng, 200).map_err(|e| format!("gc trial {trial}: {e}"))?;
    }

    // Planted hashes: k of n candidates written into random files.
    let alphabet = b"0123456789abcdfghijklmnpqrsvwxyz";
    for trial in 0..100 {
        let dir = ok(tempfile::tempdir(), "tempdir")?;
        let n = rng.gen_range(1..=50);
        let candidates: BTreeSet<String> =
            (0..n).map(|_| (0..32).map(|_| *alphabet.choose(&mut rng).unwrap() as char).collect()).collect();
        let list: Vec<&String> = candidates.iter().collect();
        let k = rng.gen_range(0..=list.len());
        let planted: BTreeSet<String> = list.choose_multiple(&mut rng, k).map(|s| (*s).clone()).collect();
        let files = rng.gen_range(1..5);
        let noise =
            |rng: &mut StdRng| -> Vec<u8> { (0..rng.gen_range(0..500)).map(|_| rng.gen::<u8>() & 0x7f).collect() };
        let mut contents: Vec<Vec<u8>> = (0..files).map(|_| noise(&mut rng)).collect();
        for h in &planted {
            let f = rng.gen_range(0..files);
            contents[f].extend_from_slice(format!("/fpm/store/{h}-x").as_bytes());
            let more = noise(&mut rng);
            contents[f].extend(more);
        }
        for (i, c) in contents.iter().enumerate() {
            ok(fs::write(dir.path().join(format!("f{i}")), c), "write")?;
        }
        // What is really there, by naive search.
        let expected: BTreeSet<String> = candidates
            .iter()
            .filter(|h| contents.iter().any(|c| c.windows(32).any(|w| w == h.as_bytes())))
            .cloned()
            .collect();
        ensure!(planted.is_subset(&expected), "trial {trial}: planting failed");
        let found = ok(scan_tree(dir.path(), &candidates), "scan")?;
        ensure!(found == expected, "scanner trial {trial}: found {} of {} planted", found.len(), expected.len());
    }
    Ok("100 random graphs matched brute-force reachability; 100 planting trials found exactly".into())
}

fn purity_audit() -> Check {
    let sb = Sandbox::new();
    let mut other = DerivationSpec::new("other", SYSTEM, Builder::Builtin(BuiltinTag::WriteText));
    other.env = vec![("text".into(), "x".into())];
    let (other_drv, od) = ok(sb.store.derivation(other), "instantiate")?;
    ok(sb.engine().build(&other_drv), "build other")?;
    let out = od.output().as_str();
    let (head, tail) = out.split_at(out.len() / 2);
    let mut spec = sb.shell_spec("sneaky", "echo \"$A$B\" > $out");
    spec.env = vec![("A".into(), head.into()), ("B".into(), tail.into())];
    let (drv, _) = ok(sb.store.derivation(spec), "instantiate sneaky")?;
    match sb.engine().build(&drv) {
        Err(Error::ImpurityDetected { paths, .. }) if paths == [out.to_string()] => {}
        r => return Err(format!("undeclared reference gave {r:?}")),
    }

    let c = sb.compiler(registry("bootstrap"));
    let greeter = ok(sb.build_package(&c, "greeter"), "build greeter")?;
    let seed = ok(c.registry().lookup("bootstrap-tools"), "lookup seed")?;
    let (_, seed_drv) = ok(c.package_derivation(&seed, SYSTEM), "seed derivation")?;
    let (_, origin) = ok(c.origin_derivation(&seed.source, SYSTEM), "seed origin")?;
    let mut seed_hashes = vec![seed_drv.output().hash().to_string(), origin.output().hash().to_string()];
    seed_hashes.extend(origin.sources().iter().map(|s| s.hash().to_string()));
    let mut files = 0;
    for entry in WalkDir::new(&greeter) {
        let entry = ok(entry, "walk")?;
        if entry.file_type().is_dir() {
            continue;
        }
        let bytes = if entry.file_type().is_symlink() {
            ok(fs::read_link(entry.path()), "readlink")?.into_os_string().into_encoded_bytes()
        } else {
            ok(fs::read(entry.path()), "read")?
        };
        files += 1;
        for h in &seed_hashes {
            ensure!(
                !bytes.windows(h.len()).any(|w| w == h.as_bytes()),
                "{} contains seed hash {h}",
                entry.path().display()
            );
        }
    }
    ensure!(files > 0, "bootstrap output is empty");
    Ok(format!(
        "undeclared reference rejected; {files} bootstrap output files free of {} seed hashes",
        seed_hashes.len()
    ))
}

fn phases_started(log: &str) -> Vec<&str> {
    log.lines().filter_map(|l| l.strip_prefix("starting phase `")).map(|l| l.trim_end_matches('\'')).collect()
}

fn phase_mechanics() -> Check {
    let sb = Sandbox::new();
    let c = sb.compiler(registry("hello"));
    let hello = ok(c.registry().lookup("hello"), "lookup hello")?;
    let (drv, _) = ok(c.package_derivation(&hello, SYSTEM), "hello derivation")?;
    let engine = sb.engine();
    ok(engine.build(&drv), "build hello")?;
    let log = ok(fs::read_to_string(engine.log_path(&drv)), "read log")?;
    let phases = phases_started(&log);
    let standard = ["unpack", "patch-source-shebangs", "configure", "build", "check", "install"];
    ensure!(phases == standard, "phases ran as {phases:?}");

    let c = sb.compiler(registry("howdy"));
    let out = ok(sb.build_package(&c, "howdy"), "build howdy")?;
    let text = ok(fs::read_to_string(out.join("hello.c")), "read hello.c")?;
    let line = "Howdy! Running on x86_64-linux.";
    ensure!(text.contains(&format!("printf (\"{line}\\n\");")), "hello.c does not greet with {line:?}");
    let howdy = ok(c.registry().lookup("howdy"), "lookup howdy")?;
    let (drv, _) = ok(c.package_derivation(&howdy, SYSTEM), "howdy derivation")?;
    let log = ok(fs::read_to_string(engine.log_path(&drv)), "read log")?;
    let phases = phases_started(&log);
    ensure!(
        phases.iter().position(|p| *p == "change-hello")
            == phases.iter().position(|p| *p == "configure").map(|i| i + 1),
        "change-hello did not run right after configure: {phases:?}"
    );
    Ok(format!("six phases in order; installed hello.c contains {line:?}"))
}

/// Package file text for `n` packages sharing one source, each depending
/// on a few earlier ones.
fn synthetic_registry(n: usize, rng: &mut StdRng) -> String {
    let src = fixtures().join("sources/hello-2.8.tar");
    let mut text = String::new();
    for i in 0..n {
        let mut inputs = String::new();
        if i > 0 {
            let mut deps: Vec<usize> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..i)).collect();
            deps.sort_unstable();
            deps.dedup();
            for d in deps {
                let _ = write!(inputs, " (\"p{d}\" ,p{d})");
            }
        }
        let _ = write!(
            text,
            r#"(define p{i}
  (package
    (name "p{i}")
    (version "1.{v}")
    (source (origin
             (method local-file)
             (uri "{src}")
             (sha256 (base32 "1brld6pbmj9bx5400kd6r4wmbvfk5hqpqxvir3jbl6g8r5vlrv9v"))))
    (build-system {bs})
    (inputs `({inputs}))
    (synopsis "synthetic")
    (description "Synthetic package {i}.")
    (home-page "http://example.org/")
    (license gpl3+)))

"#,
            v = i % 7,
            src = src.display(),
            bs = if i % 3 == 0 { "script-build-system" } else { "gnu-build-system" },
        );
    }
    text
}

fn instantiation_performance() -> Check {
    let mut rng = StdRng::seed_from_u64(7);
    let dir = ok(tempfile::tempdir(), "tempdir")?;
    ok(fs::write(dir.path().join("synthetic.pkg"), synthetic_registry(300, &mut rng)), "write registry")?;
    let sb = Sandbox::new();
    let start = Instant::now();
    let reg = Arc::new(ok(PackageRegistry::load(&[dir.path().to_path_buf()]), "load registry")?);
    ensure!(reg.len() == 300, "registry has {} packages", reg.len());
    let c = sb.compiler(reg.clone());
    let mut roots = Vec::new();
    for p in reg.packages() {
        roots.push(ok(c.package_derivation(p, SYSTEM), "instantiate")?.0);
    }
    let graph = ok(sb.store.derivation_graph(&roots), "derivation graph")?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("300 packages, {} derivations in {:.2}s", graph.len(), elapsed.as_secs_f64()))
}

fn random_text(rng: &mut StdRng) -> String {
    let pool = ['a', 'Z', '0', ' ', '"', '\\', '\n', '\t', '(', ')', ';', 'λ', 'é', '#', '\''];
    (0..rng.gen_range(0..12)).map(|_| *pool.choose(rng).unwrap()).collect()
}

fn serialization() -> Check {
    let mut rng = StdRng::seed_from_u64(8);
    let root = "/fpm/store";
    for i in 0..500 {
        let src = |rng: &mut StdRng, name: &str| {
            StorePath::make(root, PathTag::Source, &rng.gen::<[u8; 32]>(), name).unwrap()
        };
        let builder = if rng.gen_bool(0.5) {
            Builder::Path(src(&mut rng, "builder"))
        } else {
            Builder::Builtin(*[BuiltinTag::WriteText, BuiltinTag::UnpackSeed].choose(&mut rng).unwrap())
        };
        let mut spec = DerivationSpec::new(format!("d{i}"), "x86_64-linux", builder);
        spec.args = (0..rng.gen_range(0..4)).map(|_| random_text(&mut rng)).collect();
        spec.env = (0..rng.gen_range(0..4))
            .map(|k| (format!("k{k}{}", random_text(&mut rng)), random_text(&mut rng)))
            .collect();
        for j in 0..rng.gen_range(0..3) {
            let drv =
                StorePath::make(root, PathTag::Derivation, &rng.gen::<[u8; 32]>(), &format!("in{j}.drv")).unwrap();
            spec.inputs.push(DerivationInput::new(random_text(&mut rng), drv));
        }
        spec.sources = (0..rng.gen_range(0..3)).map(|j| src(&mut rng, &format!("s{j}"))).collect();
        let d = ok(Derivation::new(root, spec), "construct")?;
        let text = d.write();
        let back = ok(Derivation::parse(&text), "parse")?;
        ensure!(back == d, "derivation {i} did not round-trip");
        ensure!(back.write() == text, "derivation {i} re-serialized differently");
    }

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    let paths = ok(fs::read_to_string(golden.join("paths.txt")), "read golden paths")?;
    let mut count = 0;
    for line in paths.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        let text = ok(fs::read_to_string(golden.join(format!("{}.drv", f[0]))), "read golden")?;
        let d = ok(Derivation::parse(&text), f[0])?;
        ensure!(d.write() == text, "{}: not byte-identical after a round trip", f[0]);
        ensure!(d.drv_path().as_str() == f[1], "{}: drv path {}", f[0], d.drv_path());
        ensure!(d.output().as_str() == f[2] && d.is_consistent(), "{}: output path {}", f[0], d.output());
        count += 1;
    }
    ensure!(count == 3, "found {count} golden files");
    Ok("500 random derivations round-tripped; 3 golden files byte-identical".into())
}

fn registry_builds_and_installs() -> Check {
    let sb = Sandbox::new();
    let reg = registry("registry");
    ensure!(reg.len() == 25, "registry has {} packages", reg.len());
    let systems: BTreeSet<&str> = reg.packages().map(|p| p.build_system.as_str()).collect();
    ensure!(systems.len() == 2, "build systems used: {systems:?}");
    ensure!(reg.packages().any(|p| !p.propagated_inputs.is_empty()), "no propagated inputs");

    let c = sb.compiler(reg.clone());
    let (old, new) = (ok(reg.lookup("hello@2.7"), "lookup")?, ok(reg.lookup("hello@2.8"), "lookup")?);
    ensure!(
        old.synopsis == new.synopsis && old.home_page == new.home_page && old.source != new.source,
        "hello 2.7 does not inherit from hello 2.8"
    );
    let scheme = ok(reg.lookup("mit-scheme"), "lookup")?;
    let seed_for = |system: &str| -> Result<String, String> {
        let inputs = ok(c.build_inputs(&scheme, system), "mit-scheme inputs")?;
        Ok(inputs.iter().map(|(_, p)| p.name.clone()).collect::<Vec<_>>().join(","))
    };
    let (x86, i686) = (seed_for("x86_64-linux")?, seed_for("i686-linux")?);
    ensure!(x86 != i686, "mit-scheme inputs do not depend on the system: {x86}");

    let engine = sb.engine();
    let mut drvs = Vec::new();
    for p in reg.packages() {
        drvs.push(ok(c.package_derivation(p, SYSTEM), &p.full_name())?.0);
    }
    let results = ok(engine.build_derivations(&drvs), "build all")?;
    if let Some(r) = results.iter().find(|r| r.error.is_some()) {
        return Err(format!("{} failed: {}", r.drv_path, r.error.as_ref().unwrap()));
    }

    let p = ok(Profile::open(sb.store.clone(), &sb.state(), "alice"), "open profile")?;
    let names: BTreeSet<String> = reg.packages().map(|p| p.name.clone()).collect();
    let actions: Vec<Action> = names.iter().cloned().map(Action::Install).collect();
    let outcome = ok(p.transact(&c, &engine, &actions), "install all")?;
    let Outcome::Committed { warnings, .. } = outcome else {
        return Err("installing everything changed nothing".into());
    };
    let m = ok(p.manifest(), "manifest")?;
    ensure!(m.len() == names.len(), "{} of {} names installed", m.len(), names.len());
    let mut links = 0;
    for entry in WalkDir::new(p.link()).follow_links(false) {
        let entry = ok(entry, "walk profile")?;
        if entry.file_type().is_symlink() && entry.depth() > 0 {
            links += 1;
            ensure!(fs::metadata(entry.path()).is_ok(), "{} dangles", entry.path().display());
        }
    }
    Ok(format!(
        "{} packages built with {systems:?}; {} names installed, {links} links, {} collision warnings",
        reg.len(),
        m.len(),
        warnings.len()
    ))
}
