//! Walk through the action hierarchy: one semantic grasp, its five element
//! actions, and the elementary movements the prediction model consumes.
//!
//! ```text
//! cargo run --example decompose_grasp
//! ```

use foresight::action::{
    discretize_element, decompose_semantic, net_displacement, plan_grasp, SemanticGrasp,
};

fn main() {
    let grasp = SemanticGrasp::new([0.3, 0.1, 0.02], [-0.2, 0.15, 0.02], 0.25)
        .expect("valid semantic grasp");

    println!("element actions:");
    let elements = decompose_semantic(&grasp).expect("decompose");
    for e in &elements {
        println!(
            "  {:?}: ({:.2}, {:.2}, {:.2}) -> ({:.2}, {:.2}, {:.2})  gripper {:?}",
            e.kind, e.start[0], e.start[1], e.start[2], e.end[0], e.end[1], e.end[2],
            e.gripper_command
        );
    }

    // discretize the descent on its own: 0.23 m at max 0.05 m per movement
    let (movements, _) = discretize_element(&elements[1], 0.05, 0.0).expect("discretize");
    println!("\ndescend-and-close splits into {} movements:", movements.len());
    for m in &movements {
        println!(
            "  delta ({:+.4}, {:+.4}, {:+.4})  gripper {}",
            m.delta[0], m.delta[1], m.delta[2], m.gripper
        );
    }
    let net = net_displacement(&movements);
    println!("net displacement: ({:+.4}, {:+.4}, {:+.4})", net[0], net[1], net[2]);

    // a full plan starting from an arbitrary hover pose
    let plan = plan_grasp([0.0, 0.0, 0.25], &grasp, 0.05).expect("plan");
    println!(
        "\nfull plan from (0, 0, 0.25): {} movements, gripper closes once and opens once",
        plan.movements.len()
    );
    let actions: Vec<[f64; 4]> = plan.movements.iter().map(|m| m.to_action_vec()).collect();
    println!("first model-ready action vector: {:?}", actions[0]);
}
