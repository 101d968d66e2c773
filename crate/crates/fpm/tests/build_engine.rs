mod common;

use std::collections::BTreeMap;
use std::fs;

use common::{Sandbox, SYSTEM};
use fpm::core::derivation::{Builder, BuiltinTag, DerivationInput, DerivationSpec};
use fpm::core::StorePath;
use fpm::engine::{BuildEvent, BuildStatus};
use fpm::Error;

fn write_text(name: &str, text: &str, inputs: &[(&str, &StorePath)]) -> DerivationSpec {
    let mut spec = DerivationSpec::new(name, SYSTEM, Builder::Builtin(BuiltinTag::WriteText));
    spec.env = vec![("text".into(), text.into())];
    spec.inputs = inputs.iter().map(|(l, p)| DerivationInput::new(*l, (*p).clone())).collect();
    spec
}

#[test]
fn hello_then_cached() {
    let sb = Sandbox::new();
    let (drv, d) = sb.store.derivation(sb.shell_spec("example-1.0", "echo hello > $out")).unwrap();
    assert!(drv.as_str().ends_with("-example-1.0.drv"));
    let engine = sb.engine();
    let results = engine.build_derivations(std::slice::from_ref(&drv)).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].status, BuildStatus::Built);
    assert_eq!(fs::read(sb.store.real_path(d.output())).unwrap(), b"hello\n");
    let results = engine.build_derivations(&[drv]).unwrap();
    assert_eq!(results[0].status, BuildStatus::Cached);
    assert_eq!(engine.builder_launches(), 1);
}

#[test]
fn empty_target_list() {
    let sb = Sandbox::new();
    assert!(sb.engine().build_derivations(&[]).unwrap().is_empty());
}

#[test]
fn write_text_builtin() {
    let sb = Sandbox::new();
    let (drv, d) = sb.store.derivation(write_text("greeting", "hello", &[])).unwrap();
    assert_eq!(sb.engine().build(&drv).unwrap(), *d.output());
    assert_eq!(fs::read_to_string(sb.store.real_path(d.output())).unwrap(), "hello");
}

#[test]
fn builder_sees_only_declared_environment() {
    let sb = Sandbox::new();
    let mut spec = sb.shell_spec("env-probe", "mkdir $out; env | sort > $out/env; ls -A > $out/cwd");
    spec.env = vec![("GREETING".into(), "hi".into())];
    let (drv, d) = sb.store.derivation(spec).unwrap();
    sb.engine().build(&drv).unwrap();
    let out = sb.store.real_path(d.output());
    let env = fs::read_to_string(out.join("env")).unwrap();
    let keys: Vec<&str> = env.lines().map(|l| l.split('=').next().unwrap()).collect();
    // dash itself adds PWD.
    assert_eq!(keys, ["GREETING", "PATH", "PWD", "out"]);
    assert!(env.contains(&format!("PATH={}/bin\n", sb.store.real_path(&sb.tools()).display())));
    assert!(!env.contains("HOME="));
    assert_eq!(fs::read_to_string(out.join("cwd")).unwrap(), "");
}

#[test]
fn failing_builder_keeps_log() {
    let sb = Sandbox::new();
    let (drv, d) = sb.store.derivation(sb.shell_spec("broken", "echo oops; exit 3")).unwrap();
    let engine = sb.engine();
    let err = engine.build(&drv).unwrap_err();
    assert!(err.is_build_failure());
    let Error::BuildFailed { log: Some(log), .. } = err else { panic!("{err}") };
    assert!(fs::read_to_string(log).unwrap().contains("oops"));
    assert!(!sb.store.real_path(d.output()).exists());
    assert!(fs::read_dir(sb.state().join("tmp")).unwrap().next().is_none());
}

#[test]
fn missing_output() {
    let sb = Sandbox::new();
    let (drv, _) = sb.store.derivation(sb.shell_spec("lazy", "true")).unwrap();
    assert!(matches!(sb.engine().build(&drv), Err(Error::MissingOutput { .. })));
}

#[test]
fn wrong_system() {
    let sb = Sandbox::new();
    let mut spec = write_text("x", "x", &[]);
    spec.system = "i686-linux".into();
    let (drv, _) = sb.store.derivation(spec).unwrap();
    let err = sb.engine().build(&drv).unwrap_err();
    assert!(matches!(&err, Error::BuildFailed { reason, .. } if reason.starts_with("wrong system")), "{err}");
}

#[test]
fn builder_not_executable() {
    let sb = Sandbox::new();
    let f = sb.path("script");
    fs::write(&f, "echo hi").unwrap();
    let script = sb.store.add_to_store("script", false, &f).unwrap();
    let mut spec = DerivationSpec::new("x", SYSTEM, Builder::Path(script.clone()));
    spec.sources = vec![script];
    let (drv, _) = sb.store.derivation(spec).unwrap();
    assert!(matches!(sb.engine().build(&drv), Err(Error::BuilderNotExecutable(_))));
}

#[test]
fn diamond_with_failing_branch() {
    let sb = Sandbox::new();
    let (d, _) = sb.store.derivation(write_text("d", "d", &[])).unwrap();
    let mut bad = sb.shell_spec("b", "exit 1");
    bad.inputs.push(DerivationInput::new("d", d.clone()));
    let (b, _) = sb.store.derivation(bad).unwrap();
    let (c, _) = sb.store.derivation(write_text("c", "c", &[("d", &d)])).unwrap();
    let (a, _) = sb.store.derivation(write_text("a", "a", &[("b", &b), ("c", &c)])).unwrap();
    let results = sb.engine().build_derivations(std::slice::from_ref(&a)).unwrap();
    let status: BTreeMap<StorePath, BuildStatus> = results.iter().map(|r| (r.drv_path.clone(), r.status)).collect();
    assert_eq!(status[&d], BuildStatus::Built);
    assert_eq!(status[&b], BuildStatus::Failed);
    assert_eq!(status[&c], BuildStatus::Built);
    assert_eq!(status[&a], BuildStatus::NotAttempted);
}

#[test]
fn serial_order_is_closure_order() {
    let sb = Sandbox::new();
    let mut layer: Vec<StorePath> = Vec::new();
    for depth in 0..4 {
        let mut next = Vec::new();
        for k in 0..3 {
            let inputs: Vec<(String, StorePath)> =
                layer.iter().enumerate().map(|(i, p)| (format!("in{i}"), p.clone())).collect();
            let refs: Vec<(&str, &StorePath)> = inputs.iter().map(|(l, p)| (l.as_str(), p)).collect();
            let (p, _) = sb.store.derivation(write_text(&format!("n{depth}-{k}"), "x", &refs)).unwrap();
            next.push(p);
        }
        layer = next;
    }
    let (top, _) =
        sb.store.derivation(write_text("top", "x", &[("a", &layer[0]), ("b", &layer[1]), ("c", &layer[2])])).unwrap();
    let engine = sb.engine();
    engine.build_derivations(std::slice::from_ref(&top)).unwrap();
    let started: Vec<StorePath> = engine
        .events()
        .into_iter()
        .filter_map(|e| match e {
            BuildEvent::Start(p) => Some(p),
            BuildEvent::Finish(_) => None,
        })
        .collect();
    let closure: Vec<StorePath> = sb.store.input_closure(&top).unwrap().into_iter().map(|x| x.0).collect();
    assert_eq!(started, closure);
}

#[test]
fn parallel_builds_respect_dependencies() {
    let sb = Sandbox::new();
    let mut all = Vec::new();
    let mut prev: Option<StorePath> = None;
    for i in 0..6 {
        let mut spec = sb.shell_spec(&format!("job{i}"), &format!("sleep 0.0{i}; echo {i} > $out"));
        if let Some(p) = &prev {
            if i % 2 == 0 {
                spec.inputs.push(DerivationInput::new("prev", p.clone()));
            }
        }
        let (p, _) = sb.store.derivation(spec).unwrap();
        all.push(p.clone());
        prev = Some(p);
    }
    let engine = sb.engine().with_max_jobs(4);
    let results = engine.build_derivations(&all).unwrap();
    assert!(results.iter().all(|r| r.status == BuildStatus::Built));
    let events = engine.events();
    for (pos, e) in events.iter().enumerate() {
        let BuildEvent::Start(p) = e else { continue };
        let d = sb.store.read_derivation(p).unwrap();
        for input in d.inputs() {
            let finished = events[..pos].contains(&BuildEvent::Finish(input.drv_path.clone()));
            assert!(finished, "{p} started before {} finished", input.drv_path);
        }
    }
    assert_eq!(engine.builder_launches(), 6);
}

#[test]
fn undeclared_reference_is_impure() {
    let sb = Sandbox::new();
    let (other, od) = sb.store.derivation(write_text("other", "x", &[])).unwrap();
    sb.engine().build(&other).unwrap();
    // The path is assembled at run time so the derivation itself does not
    // mention it.
    let out = od.output().as_str();
    let (head, tail) = out.split_at(out.len() / 2);
    let mut spec = sb.shell_spec("sneaky", "echo \"$A$B\" > $out");
    spec.env = vec![("A".into(), head.into()), ("B".into(), tail.into())];
    let (drv, d) = sb.store.derivation(spec).unwrap();
    let err = sb.engine().build(&drv).unwrap_err();
    assert!(matches!(&err, Error::ImpurityDetected { paths, .. } if paths == &[out.to_string()]), "{err}");
    assert!(!sb.store.is_valid(d.output()).unwrap());
}

#[test]
fn declared_reference_is_recorded() {
    let sb = Sandbox::new();
    let (dep, dd) = sb.store.derivation(write_text("dep", "x", &[])).unwrap();
    let mut spec = sb.shell_spec("user", "echo $DEP > $out");
    spec.env = vec![("DEP".into(), dd.output().to_string())];
    spec.inputs.push(DerivationInput::new("dep", dep));
    let (drv, d) = sb.store.derivation(spec).unwrap();
    let results = sb.engine().build_derivations(&[drv]).unwrap();
    assert_eq!(results[1].references, vec![dd.output().clone()]);
    assert_eq!(sb.store.references(d.output()).unwrap().unwrap(), vec![dd.output().clone()]);
}

#[test]
fn writing_elsewhere_in_the_store_is_impure() {
    let sb = Sandbox::new();
    let root = sb.store.root_str();
    let fake = format!("{root}/0000000000000000000000000000000a-intruder");
    let mut spec = sb.shell_spec("intruder", "echo x > $out; echo x > \"$X1$X2\"");
    // Split inside the hash so the derivation does not name a store path.
    spec.env =
        vec![("X1".into(), format!("{root}/0000000000000000")), ("X2".into(), "000000000000000a-intruder".into())];
    let (drv, _) = sb.store.derivation(spec).unwrap();
    let err = sb.engine().build(&drv).unwrap_err();
    assert!(matches!(&err, Error::ImpurityDetected { paths, .. } if paths == std::slice::from_ref(&fake)), "{err}");
    assert!(!std::path::Path::new(&fake).exists());
}

#[test]
fn outputs_are_read_only() {
    use std::os::unix::fs::PermissionsExt;
    let sb = Sandbox::new();
    let (drv, d) = sb.store.derivation(sb.shell_spec("ro", "mkdir -p $out/bin; echo x > $out/bin/f")).unwrap();
    sb.engine().build(&drv).unwrap();
    let f = sb.store.real_path(d.output()).join("bin/f");
    assert_eq!(fs::metadata(&f).unwrap().permissions().mode() & 0o222, 0);
}

#[test]
fn builds_are_deterministic() {
    let a = Sandbox::new();
    let b = Sandbox::new();
    let script = "mkdir $out; printf 'a\\nb\\n' > $out/data; ln -s data $out/link";
    let mut outputs = Vec::new();
    for sb in [&a, &b] {
        let (drv, d) = sb.store.derivation(sb.shell_spec("det", script)).unwrap();
        sb.engine().build(&drv).unwrap();
        outputs.push(fpm::fsutil::hash_tree(&sb.store.real_path(d.output())).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
