use super::PersonalizationError;
use crate::encoders::ReferenceTextEncoder;
use crate::numerics::{Embedding, Scalar};

/// The 80 COCO object classes, the default category list.
pub const COCO_CATEGORIES: [&str; 80] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "traffic light",
    "fire hydrant",
    "stop sign",
    "parking meter",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "chair",
    "couch",
    "potted plant",
    "bed",
    "dining table",
    "toilet",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

/// Text of the generic prompt for a category.
pub fn category_prompt(category: &str) -> String {
    format!("an image of a {category}")
}

/// `c_l = f_l("an image of a {l}")`.
pub fn category_anchor<T: Scalar>(
    category: &str,
    encoder: &ReferenceTextEncoder<T>,
) -> Result<Embedding<T>, PersonalizationError> {
    Ok(encoder.encode_text(&category_prompt(category))?)
}

/// Zero-shot category: the category whose generic prompt has the highest mean
/// cosine with the instance's shots. Ties go to the earlier category.
pub fn assign_category<T: Scalar>(
    shots: &[Embedding<T>],
    categories: &[String],
    encoder: &ReferenceTextEncoder<T>,
) -> Result<String, PersonalizationError> {
    let anchors = categories
        .iter()
        .map(|c| category_anchor(c, encoder))
        .collect::<Result<Vec<_>, _>>()?;
    assign_with_anchors(shots, categories, &anchors)
}

/// [`assign_category`] with precomputed anchors, one per category.
pub fn assign_with_anchors<T: Scalar>(
    shots: &[Embedding<T>],
    categories: &[String],
    anchors: &[Embedding<T>],
) -> Result<String, PersonalizationError> {
    if categories.is_empty() {
        return Err(PersonalizationError::EmptyCategoryList);
    }
    if shots.is_empty() {
        return Err(PersonalizationError::EmptyInstance(
            "no shots to classify".into(),
        ));
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, anchor) in anchors.iter().enumerate() {
        let mut total = 0.0;
        for s in shots {
            total += s.cosine(anchor)?.as_f64();
        }
        let score = total / shots.len() as f64;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((k, score));
        }
    }
    Ok(categories[best.expect("non-empty").0].clone())
}
