mod common;

use common::gen::object_module;
use common::props::{self, checkpoint_case, package_case, CASES};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn wof_bytes_round_trip(m in object_module()) {
        props::wof_bytes(m)?;
    }

    #[test]
    fn assembly_round_trip(m in object_module()) {
        props::assembly(m)?;
    }

    #[test]
    fn checkpoint_file_round_trip(case in checkpoint_case()) {
        props::checkpoint_file(case)?;
    }

    #[test]
    fn migration_package_round_trip(case in package_case()) {
        props::package_file(case)?;
    }
}
