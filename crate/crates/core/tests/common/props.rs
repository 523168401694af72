//! Round-trip properties shared by the property suite and the acceptance
//! runner.

use loom_core::ids::{IslandId, NodeId};
use loom_core::migrate::MigrationPackage;
use loom_core::snapshot::{encode_checkpoint, load_checkpoint, CheckpointMode};
use loom_core::wof::asm::{assemble, disassemble};
use loom_core::wof::{parse_object, validate_object, ObjectModule};
use loom_core::{Runtime, RuntimeOptions};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::guests::CHURN;

pub const CASES: u32 = 1000;

pub fn churn(strings: usize, iterations: i64, nodes: u32) -> (Runtime, IslandId) {
    let mut rt = Runtime::new(RuntimeOptions {
        nodes,
        ..RuntimeOptions::default()
    });
    let m = rt
        .define_module("churn", vec![assemble(CHURN).unwrap()])
        .unwrap();
    let island = rt.declare_island("isle", NodeId(0), None).unwrap();
    for i in 0..strings {
        let b = rt
            .instantiate_bead(m, &format!("b{i}"), NodeId(0), Some(island))
            .unwrap();
        let w = rt.create_weave(&format!("w{i}"), &[b]).unwrap();
        rt.spawn_string(&format!("s{i}"), w, "main", &[iterations + i as i64])
            .unwrap();
    }
    (rt, island)
}

pub fn wof_bytes(m: ObjectModule) -> Result<(), TestCaseError> {
    prop_assert!(validate_object(&m).is_empty(), "{}", validate_object(&m));
    let bytes = m.serialize().unwrap();
    let back = parse_object(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(&back, &m);
    prop_assert_eq!(back.serialize().unwrap(), bytes);
    Ok(())
}

pub fn assembly(m: ObjectModule) -> Result<(), TestCaseError> {
    let text = disassemble(&m);
    let back = assemble(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
    prop_assert_eq!(&back, &m);
    prop_assert_eq!(disassemble(&back), text);
    Ok(())
}

pub type CheckpointCase = (usize, i64, u64, u64, bool);

pub fn checkpoint_case() -> impl Strategy<Value = CheckpointCase> {
    (1usize..4, 1i64..10, 0u64..16, 0u64..16, any::<bool>())
}

pub fn checkpoint_file(
    (strings, iterations, before, after, naive): CheckpointCase,
) -> Result<(), TestCaseError> {
    let (mut rt, _) = churn(strings, iterations, 1);
    rt.run_slices(before).unwrap();
    let mode = if naive {
        CheckpointMode::Naive
    } else {
        CheckpointMode::Cow
    };
    rt.checkpoint("c", mode).unwrap();
    let image = rt.memory().image();
    let state = rt.state().clone();
    rt.run_slices(after).unwrap();

    let bytes = rt.dump_checkpoint("c").unwrap();
    let loaded = load_checkpoint(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(
        encode_checkpoint(&loaded, loaded.image.as_ref().unwrap()),
        bytes.clone()
    );

    rt.drop_checkpoint("c").unwrap();
    rt.install_checkpoint(loaded).unwrap();
    rt.restore("c").unwrap();
    prop_assert_eq!(rt.memory().image(), image);
    prop_assert_eq!(rt.state(), &state);
    prop_assert_eq!(rt.dump_checkpoint("c").unwrap(), bytes);
    Ok(())
}

pub type PackageCase = (usize, i64, u64);

pub fn package_case() -> impl Strategy<Value = PackageCase> {
    (1usize..4, 1i64..10, 0u64..16)
}

pub fn package_file((strings, iterations, before): PackageCase) -> Result<(), TestCaseError> {
    let (mut rt, island) = churn(strings, iterations, 2);
    rt.run_slices(before).unwrap();
    let bytes = rt.package_island(island).unwrap();
    let pkg = MigrationPackage::decode(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(pkg.encode(), bytes.clone());
    prop_assert!(rt.memory().regions().is_empty());

    rt.admit_island(NodeId(0), &bytes).unwrap();
    prop_assert_eq!(rt.package_island(island).unwrap(), bytes);
    Ok(())
}
