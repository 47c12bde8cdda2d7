use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub const PASCAL_CLASSES: [&str; 20] = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "diningtable", "dog",
    "horse", "motorbike", "person", "potted plant", "sheep", "sofa", "train", "tv/monitor",
];

pub const COCO_CLASSES: [&str; 80] = [
    "Person", "Bicycle", "Car", "Motorcycle", "Airplane", "Bus", "Train", "Truck", "Boat", "T.light", "Fire H.",
    "Stop", "Park meter", "Bench", "Bird", "Cat", "Dog", "Horse", "Sheep", "Cow", "Elephant", "Bear", "Zebra",
    "Giraffe", "Backpack", "Umbrella", "Handbag", "Tie", "Suitcase", "Frisbee", "Skis", "Snowboard", "Sports ball",
    "Kite", "B. bat", "B. glove", "Skateboard", "Surfboard", "T. racket", "Bottle", "W. glass", "Cup", "Fork",
    "Knife", "Spoon", "Bowl", "Banana", "Apple", "Sandwich", "Orange", "Broccoli", "Carrot", "Hot dog", "Pizza",
    "Donut", "Cake", "Chair", "Couch", "P. plant", "Bed", "D. table", "Toilet", "TV", "Laptop", "Mouse", "Remote",
    "Keyboard", "Cellphone", "Microwave", "Oven", "Toaster", "Sink", "Fridge", "Book", "Clock", "Vase", "Scissors",
    "Teddy", "Hairdrier", "Toothbrush",
];

pub const NUM_FOLDS: usize = 4;

/// Disjoint train/test class partition for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub name: String,
    pub fold: usize,
    pub train_classes: BTreeSet<usize>,
    pub test_classes: BTreeSet<usize>,
    pub class_names: Vec<String>,
}

impl SplitSpec {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_name(&self, id: usize) -> &str {
        &self.class_names[id]
    }

    pub fn test_class_names(&self) -> Vec<&str> {
        self.test_classes.iter().map(|&c| self.class_name(c)).collect()
    }
}

fn check_fold(fold: usize) -> Result<()> {
    if fold >= NUM_FOLDS {
        return Err(Error::InvalidArgument(format!("fold {fold} outside 0..{NUM_FOLDS}")));
    }
    Ok(())
}

fn partition(name: &str, fold: usize, names: Vec<String>, is_test: impl Fn(usize) -> bool) -> SplitSpec {
    let (test, train): (BTreeSet<usize>, BTreeSet<usize>) = (0..names.len()).partition(|&c| is_test(c));
    SplitSpec { name: name.to_string(), fold, train_classes: train, test_classes: test, class_names: names }
}

/// Synthetic split with `num_classes` classes: class `c` is held out in fold `c % 4`.
pub fn synthetic_split(num_classes: usize, fold: usize) -> Result<SplitSpec> {
    check_fold(fold)?;
    if num_classes < NUM_FOLDS {
        return Err(Error::InvalidArgument(format!("{num_classes} classes cannot fill {NUM_FOLDS} folds")));
    }
    let names = (0..num_classes).map(|c| format!("shape-{c}")).collect();
    Ok(partition("synthetic", fold, names, |c| c % NUM_FOLDS == fold))
}

/// Named benchmark splits. `"synthetic"` uses eight classes.
pub fn build_split(dataset: &str, fold: usize) -> Result<SplitSpec> {
    check_fold(fold)?;
    match dataset {
        "pascal-5i" => {
            let names = PASCAL_CLASSES.iter().map(|s| s.to_string()).collect();
            Ok(partition(dataset, fold, names, |c| c / 5 == fold))
        }
        "coco-20i" => {
            let names = COCO_CLASSES.iter().map(|s| s.to_string()).collect();
            Ok(partition(dataset, fold, names, |c| c % NUM_FOLDS == fold))
        }
        "synthetic" => synthetic_split(8, fold),
        other => Err(Error::UnknownDataset(other.to_string())),
    }
}
