//! Hierarchical decomposition of semantic grasp actions.
//!
//! A semantic grasp (pick at one point, drop at another) splits into five
//! element actions — approach above the grasp point, descend and close,
//! lift, transport above the drop point, open — and each element action is
//! discretized into elementary end-effector displacement movements that the
//! prediction model consumes directly.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ActionError {
    #[error("non-finite coordinate in semantic grasp")]
    NonFinite,
    #[error("top height {top} must exceed grasp z {grasp_z} and drop z {drop_z}")]
    TopHeightTooLow { top: f64, grasp_z: f64, drop_z: f64 },
    #[error("max_step must be positive, got {0}")]
    NonPositiveStep(f64),
}

/// A pick-and-drop action expressed in workspace coordinates (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemanticGrasp {
    pub grasp_point: [f64; 3],
    pub drop_point: [f64; 3],
    /// Height of the hover plane the gripper travels on.
    pub top_height: f64,
}

impl SemanticGrasp {
    pub fn new(
        grasp_point: [f64; 3],
        drop_point: [f64; 3],
        top_height: f64,
    ) -> Result<Self, ActionError> {
        let g = SemanticGrasp {
            grasp_point,
            drop_point,
            top_height,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        let all = self
            .grasp_point
            .iter()
            .chain(self.drop_point.iter())
            .chain(std::iter::once(&self.top_height));
        if all.clone().any(|v| !v.is_finite()) {
            return Err(ActionError::NonFinite);
        }
        if self.top_height <= self.grasp_point[2] || self.top_height <= self.drop_point[2] {
            return Err(ActionError::TopHeightTooLow {
                top: self.top_height,
                grasp_z: self.grasp_point[2],
                drop_z: self.drop_point[2],
            });
        }
        Ok(())
    }
}

/// The five phases of a grasp, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementKind {
    ApproachTop,
    DescendAndClose,
    Lift,
    Transport,
    OpenAndDrop,
}

impl ElementKind {
    /// Canonical phase order.
    pub const ORDER: [ElementKind; 5] = [
        ElementKind::ApproachTop,
        ElementKind::DescendAndClose,
        ElementKind::Lift,
        ElementKind::Transport,
        ElementKind::OpenAndDrop,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GripperCommand {
    Open,
    Close,
    Hold,
}

/// One straight-line segment of a grasp with its gripper command.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementAction {
    pub kind: ElementKind,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub gripper_command: GripperCommand,
}

impl ElementAction {
    pub fn displacement(&self) -> [f64; 3] {
        [
            self.end[0] - self.start[0],
            self.end[1] - self.start[1],
            self.end[2] - self.start[2],
        ]
    }

    pub fn length(&self) -> f64 {
        let d = self.displacement();
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// An elementary end-effector displacement plus the gripper channel state
/// after the movement (0 = open, 1 = closed).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Movement {
    pub delta: [f64; 3],
    pub gripper: f64,
}

impl Movement {
    /// Flat action vector in the model's default layout (Δx, Δy, Δz, gripper).
    pub fn to_action_vec(self) -> [f64; 4] {
        [self.delta[0], self.delta[1], self.delta[2], self.gripper]
    }
}

/// Decompose a semantic grasp into its five element actions, starting from
/// the hover position directly above the grasp point.
pub fn decompose_semantic(grasp: &SemanticGrasp) -> Result<Vec<ElementAction>, ActionError> {
    let start = [grasp.grasp_point[0], grasp.grasp_point[1], grasp.top_height];
    decompose_semantic_from(start, grasp)
}

/// Decompose a semantic grasp into its five element actions, with the
/// approach beginning at an explicit gripper pose.
pub fn decompose_semantic_from(
    start_pose: [f64; 3],
    grasp: &SemanticGrasp,
) -> Result<Vec<ElementAction>, ActionError> {
    grasp.validate()?;
    if start_pose.iter().any(|v| !v.is_finite()) {
        return Err(ActionError::NonFinite);
    }
    let [gx, gy, gz] = grasp.grasp_point;
    let [dx, dy, _] = grasp.drop_point;
    let top = grasp.top_height;
    let grasp_top = [gx, gy, top];
    let grasp_low = [gx, gy, gz];
    let drop_top = [dx, dy, top];
    Ok(vec![
        ElementAction {
            kind: ElementKind::ApproachTop,
            start: start_pose,
            end: grasp_top,
            gripper_command: GripperCommand::Hold,
        },
        ElementAction {
            kind: ElementKind::DescendAndClose,
            start: grasp_top,
            end: grasp_low,
            gripper_command: GripperCommand::Close,
        },
        ElementAction {
            kind: ElementKind::Lift,
            start: grasp_low,
            end: grasp_top,
            gripper_command: GripperCommand::Hold,
        },
        ElementAction {
            kind: ElementKind::Transport,
            start: grasp_top,
            end: drop_top,
            gripper_command: GripperCommand::Hold,
        },
        ElementAction {
            kind: ElementKind::OpenAndDrop,
            start: drop_top,
            end: drop_top,
            gripper_command: GripperCommand::Open,
        },
    ])
}

/// Split an element action into equal-length movements of norm ≤ `max_step`.
///
/// The sum of deltas reproduces `end - start` to floating-point accuracy. A
/// zero-length element still emits one zero movement so its gripper command
/// is never dropped. `gripper_before` is the gripper channel value (0/1)
/// coming into this element; the returned pair is the movement list and the
/// channel value after the element.
pub fn discretize_element(
    e: &ElementAction,
    max_step: f64,
    gripper_before: f64,
) -> Result<(Vec<Movement>, f64), ActionError> {
    if !(max_step > 0.0) {
        return Err(ActionError::NonPositiveStep(max_step));
    }
    let gripper_after = match e.gripper_command {
        GripperCommand::Open => 0.0,
        GripperCommand::Close => 1.0,
        GripperCommand::Hold => gripper_before,
    };
    let d = e.displacement();
    let len = e.length();
    let n = if len == 0.0 {
        1
    } else {
        (len / max_step).ceil() as usize
    };
    let mut out = Vec::with_capacity(n);
    let mut prev = e.start;
    for i in 1..=n {
        // interpolate positions and difference them so the deltas telescope
        let next = if i == n {
            e.end
        } else {
            let f = i as f64 / n as f64;
            [
                e.start[0] + f * d[0],
                e.start[1] + f * d[1],
                e.start[2] + f * d[2],
            ]
        };
        let delta = [next[0] - prev[0], next[1] - prev[1], next[2] - prev[2]];
        let gripper = if i == n { gripper_after } else { gripper_before };
        out.push(Movement { delta, gripper });
        prev = next;
    }
    Ok((out, gripper_after))
}

/// Componentwise sum of movement deltas.
pub fn net_displacement(movements: &[Movement]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for m in movements {
        acc[0] += m.delta[0];
        acc[1] += m.delta[1];
        acc[2] += m.delta[2];
    }
    acc
}

/// A full grasp flattened to movements, with per-movement element kinds.
pub struct GraspPlan {
    pub elements: Vec<ElementAction>,
    pub movements: Vec<Movement>,
    /// `kinds[i]` is the element that produced `movements[i]`.
    pub kinds: Vec<ElementKind>,
}

/// Decompose and discretize a grasp in one pass, starting at `start_pose`
/// with the gripper open.
pub fn plan_grasp(
    start_pose: [f64; 3],
    grasp: &SemanticGrasp,
    max_step: f64,
) -> Result<GraspPlan, ActionError> {
    let elements = decompose_semantic_from(start_pose, grasp)?;
    let mut movements = Vec::new();
    let mut kinds = Vec::new();
    let mut gripper = 0.0;
    for e in &elements {
        let (ms, g_after) = discretize_element(e, max_step, gripper)?;
        kinds.extend(std::iter::repeat(e.kind).take(ms.len()));
        movements.extend(ms);
        gripper = g_after;
    }
    Ok(GraspPlan {
        elements,
        movements,
        kinds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example_grasp() -> SemanticGrasp {
        SemanticGrasp::new([0.3, 0.1, 0.02], [-0.2, 0.15, 0.02], 0.25).unwrap()
    }

    #[test]
    fn five_elements_in_figure_order_with_expected_endpoints() {
        let elems = decompose_semantic(&example_grasp()).unwrap();
        assert_eq!(elems.len(), 5);
        let kinds: Vec<_> = elems.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, ElementKind::ORDER);
        assert_eq!(elems[0].end, [0.3, 0.1, 0.25]);
        assert_eq!(elems[1].end, [0.3, 0.1, 0.02]);
        assert_eq!(elems[2].end, [0.3, 0.1, 0.25]);
        assert_eq!(elems[3].end, [-0.2, 0.15, 0.25]);
        assert_eq!(elems[4].start, elems[4].end);
        assert_eq!(elems[4].end, [-0.2, 0.15, 0.25]);
        // consecutive elements chain
        for pair in elems.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
        // hold phases do not move the gripper jaw
        for e in &elems {
            match e.kind {
                ElementKind::DescendAndClose => {
                    assert_eq!(e.gripper_command, GripperCommand::Close)
                }
                ElementKind::OpenAndDrop => assert_eq!(e.gripper_command, GripperCommand::Open),
                _ => assert_eq!(e.gripper_command, GripperCommand::Hold),
            }
        }
    }

    #[test]
    fn same_grasp_and_drop_point_still_emits_transport() {
        let g = SemanticGrasp::new([0.3, 0.1, 0.02], [0.3, 0.1, 0.02], 0.25).unwrap();
        let elems = decompose_semantic(&g).unwrap();
        assert_eq!(elems.len(), 5);
        let t = &elems[3];
        assert_eq!(t.kind, ElementKind::Transport);
        assert_eq!(t.displacement(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_grasps_are_rejected() {
        assert_eq!(
            SemanticGrasp::new([f64::NAN, 0.0, 0.0], [0.0, 0.0, 0.0], 1.0).unwrap_err(),
            ActionError::NonFinite
        );
        assert!(matches!(
            SemanticGrasp::new([0.0, 0.0, 0.3], [0.0, 0.1, 0.0], 0.25).unwrap_err(),
            ActionError::TopHeightTooLow { .. }
        ));
    }

    #[test]
    fn straight_descent_discretizes_into_five_steps() {
        // 0.25 -> 0.02 with max_step 0.05: ceil(0.23/0.05) = 5 equal steps
        let e = ElementAction {
            kind: ElementKind::DescendAndClose,
            start: [0.3, 0.1, 0.25],
            end: [0.3, 0.1, 0.02],
            gripper_command: GripperCommand::Close,
        };
        let (ms, g_after) = discretize_element(&e, 0.05, 0.0).unwrap();
        assert_eq!(ms.len(), 5);
        assert_eq!(g_after, 1.0);
        let net = net_displacement(&ms);
        assert!((net[2] - (-0.23)).abs() < 1e-9);
        assert!(net[0].abs() < 1e-12 && net[1].abs() < 1e-12);
        // gripper closes on the final step only
        for m in &ms[..4] {
            assert_eq!(m.gripper, 0.0);
            assert!(norm(m.delta) <= 0.05 + 1e-12);
        }
        assert_eq!(ms[4].gripper, 1.0);
    }

    #[test]
    fn zero_length_element_emits_one_zero_movement_with_command() {
        let e = ElementAction {
            kind: ElementKind::OpenAndDrop,
            start: [0.1, 0.2, 0.25],
            end: [0.1, 0.2, 0.25],
            gripper_command: GripperCommand::Open,
        };
        let (ms, g_after) = discretize_element(&e, 0.05, 1.0).unwrap();
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].delta, [0.0, 0.0, 0.0]);
        assert_eq!(ms[0].gripper, 0.0);
        assert_eq!(g_after, 0.0);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let e = decompose_semantic(&example_grasp()).unwrap()[1];
        assert!(matches!(
            discretize_element(&e, 0.0, 0.0),
            Err(ActionError::NonPositiveStep(_))
        ));
        assert!(matches!(
            discretize_element(&e, -0.1, 0.0),
            Err(ActionError::NonPositiveStep(_))
        ));
    }

    #[test]
    fn net_displacement_basics() {
        assert_eq!(net_displacement(&[]), [0.0, 0.0, 0.0]);
        let ms = [
            Movement {
                delta: [0.1, 0.0, 0.0],
                gripper: 0.0,
            },
            Movement {
                delta: [-0.1, 0.0, 0.0],
                gripper: 0.0,
            },
        ];
        assert_eq!(net_displacement(&ms), [0.0, 0.0, 0.0]);
    }

    fn norm(d: [f64; 3]) -> f64 {
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }

    proptest! {
        /// Full-plan round trip: per-element nets match displacements, the
        /// gripper closes exactly once and opens exactly once, and steps obey
        /// the configured bound.
        #[test]
        fn plan_round_trip(
            gx in -0.4f64..0.4, gy in -0.3f64..0.3, gz in 0.0f64..0.1,
            dx in -0.4f64..0.4, dy in -0.3f64..0.3, dz in 0.0f64..0.1,
            extra in 0.01f64..0.4,
            sx in -0.4f64..0.4, sy in -0.3f64..0.3,
            max_step in 0.005f64..0.2,
        ) {
            let top = gz.max(dz) + extra;
            let grasp = SemanticGrasp::new([gx, gy, gz], [dx, dy, dz], top).unwrap();
            let start = [sx, sy, top];
            let plan = plan_grasp(start, &grasp, max_step).unwrap();

            prop_assert_eq!(plan.elements.len(), 5);
            let kinds: Vec<_> = plan.elements.iter().map(|e| e.kind).collect();
            prop_assert_eq!(kinds, ElementKind::ORDER.to_vec());
            for pair in plan.elements.windows(2) {
                prop_assert_eq!(pair[0].end, pair[1].start);
            }

            // per-element round trip at 1e-9
            let mut at = 0usize;
            for e in &plan.elements {
                let count = plan.kinds.iter().filter(|&&k| k == e.kind).count();
                let net = net_displacement(&plan.movements[at..at + count]);
                let d = e.displacement();
                for axis in 0..3 {
                    prop_assert!((net[axis] - d[axis]).abs() < 1e-9);
                }
                at += count;
            }

            // whole-plan net lands on the drop-top position
            let net = net_displacement(&plan.movements);
            let expect = [grasp.drop_point[0] - start[0], grasp.drop_point[1] - start[1], top - start[2]];
            for axis in 0..3 {
                prop_assert!((net[axis] - expect[axis]).abs() < 1e-9);
            }

            // step bound and exactly one close and one open transition
            let mut closes = 0;
            let mut opens = 0;
            let mut g = 0.0;
            for m in &plan.movements {
                prop_assert!(norm(m.delta) <= max_step * (1.0 + 1e-12));
                if m.gripper > g { closes += 1; }
                if m.gripper < g { opens += 1; }
                g = m.gripper;
            }
            prop_assert_eq!(closes, 1);
            prop_assert_eq!(opens, 1);
        }
    }
}
