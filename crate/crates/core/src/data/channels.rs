//! Canonical telemetry channel schema and its sensor groups.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// All 31 channels in canonical order (grouped as in [`ChannelGroup::ALL`]).
pub const CHANNELS: [&str; 31] = [
    "Acceleration (x)",
    "Acceleration (y)",
    "Acceleration (z)",
    "Distance to next vehicle",
    "Distance to next intersection",
    "Distance to next stop sign",
    "Distance to next traffic signal",
    "Distance to next yield sign",
    "Distance to completion",
    "Gear",
    "Clutch pedal",
    "Number of lanes present",
    "Fast lane",
    "Location in lane (right)",
    "Location in lane (center)",
    "Location in lane (left)",
    "Lane width",
    "Acceleration pedal",
    "Brake pedal",
    "Steering wheel angle",
    "Curve radius",
    "Road angle",
    "Speed (x)",
    "Speed (y)",
    "Speed (z)",
    "Speed (next vehicle)",
    "Speed limit",
    "Turn indicators",
    "Turn indicators on intersection",
    "Horn",
    "Vehicle heading",
];

pub const NUM_CHANNELS: usize = CHANNELS.len();

/// Units the synthetic generator uses for each canonical channel.
pub const UNITS: [&str; 31] = [
    "m/s^2", "m/s^2", "m/s^2", "m", "m", "m", "m", "m", "m", "gear", "fraction", "count", "flag", "m", "m", "m", "m",
    "fraction", "fraction", "deg", "m", "deg", "m/s", "m/s", "m/s", "m/s", "m/s", "flag", "flag", "flag", "deg",
];

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNELS.iter().position(|c| *c == name)
}

/// Sensor groups; removal in ablations always takes whole groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGroup {
    Acceleration,
    DistanceInformation,
    Gearbox,
    LaneInformation,
    Pedals,
    RoadAngle,
    Speed,
    TurnIndicators,
    Uncategorized,
}

impl ChannelGroup {
    pub const ALL: [ChannelGroup; 9] = [
        ChannelGroup::Acceleration,
        ChannelGroup::DistanceInformation,
        ChannelGroup::Gearbox,
        ChannelGroup::LaneInformation,
        ChannelGroup::Pedals,
        ChannelGroup::RoadAngle,
        ChannelGroup::Speed,
        ChannelGroup::TurnIndicators,
        ChannelGroup::Uncategorized,
    ];

    /// Canonical channel indices belonging to this group.
    pub fn members(self) -> std::ops::Range<usize> {
        match self {
            ChannelGroup::Acceleration => 0..3,
            ChannelGroup::DistanceInformation => 3..9,
            ChannelGroup::Gearbox => 9..11,
            ChannelGroup::LaneInformation => 11..17,
            ChannelGroup::Pedals => 17..19,
            ChannelGroup::RoadAngle => 19..22,
            ChannelGroup::Speed => 22..27,
            ChannelGroup::TurnIndicators => 27..29,
            ChannelGroup::Uncategorized => 29..31,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelGroup::Acceleration => "acceleration",
            ChannelGroup::DistanceInformation => "distance_information",
            ChannelGroup::Gearbox => "gearbox",
            ChannelGroup::LaneInformation => "lane_information",
            ChannelGroup::Pedals => "pedals",
            ChannelGroup::RoadAngle => "road_angle",
            ChannelGroup::Speed => "speed",
            ChannelGroup::TurnIndicators => "turn_indicators",
            ChannelGroup::Uncategorized => "uncategorized",
        }
    }

    pub fn of_channel(index: usize) -> Option<ChannelGroup> {
        Self::ALL.into_iter().find(|g| g.members().contains(&index))
    }
}

impl fmt::Display for ChannelGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelGroup {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| DataError::Config(format!("unknown channel group '{s}'")))
    }
}

/// Which channel groups survive a masking step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "groups")]
pub enum ChannelSelection {
    #[default]
    All,
    Remove(Vec<ChannelGroup>),
    KeepOnly(Vec<ChannelGroup>),
}

impl ChannelSelection {
    /// Canonical indices kept by this selection, in canonical order.
    pub fn kept_channels(&self) -> Vec<usize> {
        (0..NUM_CHANNELS)
            .filter(|&c| {
                let g = ChannelGroup::of_channel(c).expect("every channel has a group");
                match self {
                    ChannelSelection::All => true,
                    ChannelSelection::Remove(r) => !r.contains(&g),
                    ChannelSelection::KeepOnly(k) => k.contains(&g),
                }
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let join = |gs: &[ChannelGroup]| gs.iter().map(|g| g.name()).collect::<Vec<_>>().join("+");
        match self {
            ChannelSelection::All => "all_included".into(),
            ChannelSelection::Remove(r) => format!("without_{}", join(r)),
            ChannelSelection::KeepOnly(k) => format!("only_{}", join(k)),
        }
    }
}
