use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reviewkd_tensor::ParamStore;

use super::stagenet::{ArchSpec, StageNet};
use crate::error::{Error, Result};

struct Entry {
    name: &'static str,
    stem: usize,
    channels: &'static [usize],
    blocks: &'static [usize],
    downsample: &'static [usize],
}

// CIFAR ResNet / WideResNet depths and widths, the first block split off
// as stage 1, followed by desk-scale stand-ins.
const REGISTRY: &[Entry] = &[
    Entry {
        name: "resnet20",
        stem: 16,
        channels: &[16, 16, 32, 64],
        blocks: &[1, 2, 3, 3],
        downsample: &[1, 1, 2, 2],
    },
    Entry {
        name: "resnet32",
        stem: 16,
        channels: &[16, 16, 32, 64],
        blocks: &[1, 4, 5, 5],
        downsample: &[1, 1, 2, 2],
    },
    Entry {
        name: "resnet56",
        stem: 16,
        channels: &[16, 16, 32, 64],
        blocks: &[1, 8, 9, 9],
        downsample: &[1, 1, 2, 2],
    },
    Entry {
        name: "resnet110",
        stem: 16,
        channels: &[16, 16, 32, 64],
        blocks: &[1, 17, 18, 18],
        downsample: &[1, 1, 2, 2],
    },
    Entry {
        name: "wrn-16-2",
        stem: 16,
        channels: &[32, 32, 64, 128],
        blocks: &[1, 1, 2, 2],
        downsample: &[1, 1, 2, 2],
    },
    Entry {
        name: "wrn-40-1",
        stem: 16,
        channels: &[16, 16, 32, 64],
        blocks: &[1, 5, 6, 6],
        downsample: &[1, 1, 2, 2],
    },
    Entry {
        name: "wrn-40-2",
        stem: 16,
        channels: &[32, 32, 64, 128],
        blocks: &[1, 5, 6, 6],
        downsample: &[1, 1, 2, 2],
    },
    Entry {
        name: "tiny-resnet-8",
        stem: 4,
        channels: &[4, 8, 16, 32],
        blocks: &[1, 1, 1, 1],
        downsample: &[1, 2, 2, 2],
    },
    Entry {
        name: "tiny-resnet-14",
        stem: 4,
        channels: &[4, 8, 16, 32],
        blocks: &[2, 2, 2, 2],
        downsample: &[1, 2, 2, 2],
    },
    Entry {
        name: "tiny-resnet-26",
        stem: 4,
        channels: &[4, 8, 16, 32],
        blocks: &[3, 3, 3, 3],
        downsample: &[1, 2, 2, 2],
    },
    Entry {
        name: "tiny-wrn-16-2",
        stem: 4,
        channels: &[8, 16, 32, 32],
        blocks: &[1, 1, 1, 1],
        downsample: &[1, 2, 2, 2],
    },
    Entry {
        name: "tiny-wrn-40-2",
        stem: 4,
        channels: &[8, 16, 32, 32],
        blocks: &[3, 3, 3, 3],
        downsample: &[1, 2, 2, 2],
    },
    Entry {
        name: "tiny-wrn-3stage",
        stem: 4,
        channels: &[8, 16, 32],
        blocks: &[2, 2, 2],
        downsample: &[1, 2, 2],
    },
];

/// Names of every registered architecture.
pub fn arch_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

/// Looks up an architecture by name for `num_classes` outputs.
pub fn arch(name: &str, num_classes: usize) -> Result<ArchSpec> {
    let e = REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownArch(name.to_string()))?;
    Ok(ArchSpec {
        name: e.name.to_string(),
        in_channels: 3,
        stem_channels: e.stem,
        stage_channels: e.channels.to_vec(),
        blocks_per_stage: e.blocks.to_vec(),
        downsample: e.downsample.to_vec(),
        num_classes,
        zero_init_residual: false,
    })
}

/// Name, stage count and trainable-parameter count of one architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSummary {
    pub name: String,
    pub stages: usize,
    pub parameters: usize,
    pub channels: Vec<usize>,
}

pub fn summarize(name: &str, num_classes: usize) -> Result<ArchSummary> {
    let spec = arch(name, num_classes)?;
    let mut store = ParamStore::new();
    let net = StageNet::new(spec, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(ArchSummary {
        name: name.to_string(),
        stages: net.stages(),
        parameters: net.parameter_count(&store),
        channels: net.channels().to_vec(),
    })
}

/// Resolves a student/teacher pair, requiring equal stage counts.
pub fn build_pair(student: &str, teacher: &str, num_classes: usize) -> Result<(ArchSpec, ArchSpec)> {
    let s = arch(student, num_classes)?;
    let t = arch(teacher, num_classes)?;
    if s.stages() != t.stages() {
        return Err(Error::StageCount {
            student: s.stages(),
            teacher: t.stages(),
        });
    }
    Ok((s, t))
}
