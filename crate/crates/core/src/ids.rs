//! Identifier newtypes shared across the runtime.

use std::fmt;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident($inner:ty), $prefix:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl From<$inner> for $name {
            fn from(v: $inner) -> Self {
                Self(v)
            }
        }
    };
}

id_type!(
    /// Index of a defined module in the runtime's module table.
    ModuleId(u32),
    "m"
);
id_type!(
    /// Bead identifiers are monotone and never reused within a run.
    BeadId(u64),
    "b"
);
id_type!(WeaveId(u64), "w");
id_type!(StringId(u64), "s");
id_type!(IslandId(u32), "i");
id_type!(
    /// Simulated node (CPU) identifier; only the low 24 bits are addressable.
    NodeId(u32),
    "n"
);
