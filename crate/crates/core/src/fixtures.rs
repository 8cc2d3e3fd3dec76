//! Built-in problem fixtures, shipped as files under `fixtures/` and embedded
//! here so that tests and the CLI can use them without touching the disk.

use crate::bilevel::BilevelProblem;
use crate::system::{ParametricSystem, ProblemFile};

#[derive(Debug, Clone, Copy)]
pub struct Fixture {
    pub name: &'static str,
    /// Path relative to the repository root.
    pub path: &'static str,
    pub text: &'static str,
}

pub const FIXTURES: &[Fixture] = &[
    Fixture {
        name: "SYS-BALL",
        path: "fixtures/sys_ball.prob",
        text: include_str!("../../../fixtures/sys_ball.prob"),
    },
    Fixture {
        name: "SYS-EX1",
        path: "fixtures/sys_ex1.prob",
        text: include_str!("../../../fixtures/sys_ex1.prob"),
    },
    Fixture {
        name: "SYS-LIN",
        path: "fixtures/sys_lin.prob",
        text: include_str!("../../../fixtures/sys_lin.prob"),
    },
    Fixture {
        name: "SYS-RANKDROP",
        path: "fixtures/sys_rankdrop.prob",
        text: include_str!("../../../fixtures/sys_rankdrop.prob"),
    },
    Fixture {
        name: "SYS-DEGEN",
        path: "fixtures/sys_degen.prob",
        text: include_str!("../../../fixtures/sys_degen.prob"),
    },
    Fixture {
        name: "BLPP-1",
        path: "fixtures/blpp_1.prob",
        text: include_str!("../../../fixtures/blpp_1.prob"),
    },
    Fixture {
        name: "BLPP-BOX",
        path: "fixtures/blpp_box.prob",
        text: include_str!("../../../fixtures/blpp_box.prob"),
    },
];

pub fn find(name: &str) -> Option<&'static Fixture> {
    FIXTURES.iter().find(|f| f.name.eq_ignore_ascii_case(name))
}

pub fn load(name: &str) -> ProblemFile {
    let fixture = find(name).unwrap_or_else(|| panic!("no fixture named {name}"));
    ProblemFile::parse(fixture.text).expect("shipped fixtures parse")
}

pub fn sys_ball() -> ParametricSystem {
    load("SYS-BALL").system
}

pub fn sys_ex1() -> ParametricSystem {
    load("SYS-EX1").system
}

pub fn sys_lin() -> ParametricSystem {
    load("SYS-LIN").system
}

pub fn sys_rankdrop() -> ParametricSystem {
    load("SYS-RANKDROP").system
}

pub fn sys_degen() -> ParametricSystem {
    load("SYS-DEGEN").system
}

pub fn blpp_1() -> BilevelProblem {
    BilevelProblem::from_problem_file(load("BLPP-1")).expect("BLPP-1 is a bilevel problem")
}

pub fn blpp_box() -> BilevelProblem {
    BilevelProblem::from_problem_file(load("BLPP-BOX")).expect("BLPP-BOX is a bilevel problem")
}
