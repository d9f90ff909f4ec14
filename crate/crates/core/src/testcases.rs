//! Small desk cases shared by unit tests across modules.

use nalgebra::{DMatrix, DVector};

use crate::netmodel::{Generator, Line, Load, NetworkCase};

/// One bus, one generator, one load. The smallest market that clears.
pub(crate) fn single_bus() -> NetworkCase {
    NetworkCase {
        name: "single".into(),
        buses: vec!["b1".into()],
        lines: vec![],
        generators: vec![Generator {
            bus: 0,
            p_min: 0.0,
            p_max: 10_000.0,
            cost_quad: 0.01,
            cost_lin: 10.0,
        }],
        loads: vec![Load {
            bus: 0,
            mean: 100.0,
            bound: Some(50.0),
        }],
        shed_quad: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0])),
        shed_lin: DVector::from_vec(vec![500.0]),
        slack: 0,
    }
}

/// Two buses, one line (limit 80 under the 100 MW demand, so the line
/// congests at the mean), one generator, one load.
pub(crate) fn two_bus() -> NetworkCase {
    NetworkCase {
        name: "two_bus".into(),
        buses: vec!["b1".into(), "b2".into()],
        lines: vec![Line {
            from: 0,
            to: 1,
            susceptance: 10.0,
            limit: 80.0,
        }],
        generators: vec![Generator {
            bus: 0,
            p_min: 0.0,
            p_max: 200.0,
            cost_quad: 0.01,
            cost_lin: 10.0,
        }],
        loads: vec![Load {
            bus: 1,
            mean: 100.0,
            bound: Some(50.0),
        }],
        shed_quad: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0])),
        shed_lin: DVector::from_vec(vec![500.0]),
        slack: 0,
    }
}

/// Three-bus ring with equal susceptances, two generators, two loads.
/// Line limits are tight enough that several congestion patterns appear
/// inside the perturbation box.
pub(crate) fn three_bus_ring() -> NetworkCase {
    NetworkCase {
        name: "ring3".into(),
        buses: vec!["b1".into(), "b2".into(), "b3".into()],
        lines: vec![
            Line {
                from: 0,
                to: 1,
                susceptance: 10.0,
                limit: 60.0,
            },
            Line {
                from: 1,
                to: 2,
                susceptance: 10.0,
                limit: 60.0,
            },
            Line {
                from: 0,
                to: 2,
                susceptance: 10.0,
                limit: 45.0,
            },
        ],
        generators: vec![
            Generator {
                bus: 0,
                p_min: 0.0,
                p_max: 120.0,
                cost_quad: 0.02,
                cost_lin: 10.0,
            },
            Generator {
                bus: 2,
                p_min: 0.0,
                p_max: 90.0,
                cost_quad: 0.04,
                cost_lin: 20.0,
            },
        ],
        loads: vec![
            Load {
                bus: 1,
                mean: 50.0,
                bound: Some(30.0),
            },
            Load {
                bus: 2,
                mean: 30.0,
                bound: Some(20.0),
            },
        ],
        shed_quad: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0])),
        shed_lin: DVector::from_vec(vec![500.0, 500.0]),
        slack: 0,
    }
}
