//! Three-scene evaluation fixture with a hand-computed mAP.

use hoiu::evaluator::{Detection, SceneTruth};
use hoiu::geometry::BBox;
use hoiu::scenegen::{object, verb, GroundTruthTriplet};

pub const RARE: [usize; 2] = [verb::SIT_ON, verb::KICK];

pub fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn human() -> BBox {
    b(0.0, 0.0, 0.4, 0.4)
}

pub fn thing() -> BBox {
    b(0.5, 0.5, 0.9, 0.9)
}

pub fn gt(object_class: usize, verb: usize) -> GroundTruthTriplet {
    GroundTruthTriplet {
        human_box: human(),
        object_box: thing(),
        object_class,
        verb,
    }
}

pub fn det(scene: usize, slot: usize, object_class: usize, verb: usize, score: f64) -> Detection {
    Detection {
        scene,
        slot,
        human_box: human(),
        object_box: thing(),
        object_class,
        verb,
        raw_score: score,
        calibrated_score: score,
        score,
    }
}

/// Scene 0: a ball that is held and kicked. Scene 1: a bike ridden and a ball
/// held. Scene 2: a screen looked at.
pub fn fixture_truth() -> Vec<SceneTruth> {
    vec![
        SceneTruth {
            triplets: vec![gt(object::BALL, verb::HOLD), gt(object::BALL, verb::KICK)],
            object_classes: vec![object::BALL],
        },
        SceneTruth {
            triplets: vec![gt(object::BIKE, verb::RIDE), gt(object::BALL, verb::HOLD)],
            object_classes: vec![object::BALL, object::BIKE],
        },
        SceneTruth {
            triplets: vec![gt(object::SCREEN, verb::LOOK_AT)],
            object_classes: vec![object::SCREEN],
        },
    ]
}

pub fn fixture_detections() -> Vec<Detection> {
    let mut off = det(1, 1, object::BALL, verb::HOLD, 0.8);
    // IoU 1/3 with the true human box.
    off.human_box = b(0.2, 0.0, 0.6, 0.4);
    vec![
        det(0, 0, object::BALL, verb::HOLD, 0.9),
        off,
        det(0, 1, object::BALL, verb::HOLD, 0.7),
        det(1, 0, object::BALL, verb::HOLD, 0.6),
        // Scene 2 holds no object a hold can take: ignored.
        det(2, 0, object::BALL, verb::HOLD, 0.95),
        det(0, 2, object::CUP, verb::KICK, 0.5),
        det(0, 3, object::BALL, verb::KICK, 0.4),
        det(2, 1, object::SCREEN, verb::LOOK_AT, 0.3),
        det(0, 4, object::BALL, verb::LOOK_AT, 0.2),
    ]
}

// hold: TP FP FP TP over 2 GT -> 0.5*1 + 0.5*0.5 = 0.75
// kick: FP TP over 1 GT       -> 0.5
// ride: nothing over 1 GT     -> 0
// look_at: TP FP over 1 GT    -> 1
pub const FIXTURE_MAP: f64 = (0.75 + 0.5 + 0.0 + 1.0) / 4.0;
