use crate::error::{Error, Result};
use crate::geom::{ConfidenceMap, PointMap};

/// The three pointmaps and confidences regressed for an image pair:
/// image 1 in frame 1, image 2 in frame 1, image 2 in frame 2.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub x11: PointMap,
    pub x21: PointMap,
    pub x22: PointMap,
    pub c11: ConfidenceMap,
    pub c21: ConfidenceMap,
    pub c22: ConfidenceMap,
}

impl PairPrediction {
    pub fn new(
        x11: PointMap,
        x21: PointMap,
        x22: PointMap,
        c11: ConfidenceMap,
        c21: ConfidenceMap,
        c22: ConfidenceMap,
    ) -> Result<Self> {
        let pairs = [
            (x11.dims(), c11.dims()),
            (x21.dims(), c21.dims()),
            (x22.dims(), c22.dims()),
        ];
        for (a, b) in pairs {
            if a != b {
                return Err(Error::DimensionMismatch {
                    expected: a,
                    got: b,
                });
            }
        }
        if x21.dims() != x22.dims() {
            return Err(Error::DimensionMismatch {
                expected: x22.dims(),
                got: x21.dims(),
            });
        }
        if (x11.subject, x11.frame) != (0, 0)
            || (x21.subject, x21.frame) != (1, 0)
            || (x22.subject, x22.frame) != (1, 1)
        {
            return Err(Error::invalid(
                "pair prediction tags must be (0,0), (1,0), (1,1) for x11, x21, x22",
            ));
        }
        Ok(PairPrediction {
            x11,
            x21,
            x22,
            c11,
            c21,
            c22,
        })
    }

    /// Ground truth used as a prediction with unit confidences.
    pub fn from_points(x11: PointMap, x21: PointMap, x22: PointMap) -> Result<Self> {
        let c11 = ConfidenceMap::ones(x11.width, x11.height);
        let c21 = ConfidenceMap::ones(x21.width, x21.height);
        let c22 = ConfidenceMap::ones(x22.width, x22.height);
        Self::new(x11, x21, x22, c11, c21, c22)
    }
}
