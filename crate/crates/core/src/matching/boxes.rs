use crate::error::{Error, Result};

/// Normalized `(cx, cy, w, h)` box.
pub type BoxCxcywh = [f64; 4];

/// `(x1, y1, x2, y2)` corners.
pub fn to_corners(b: BoxCxcywh) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn area(b: BoxCxcywh) -> f64 {
    b[2] * b[3]
}

fn check_extent(b: BoxCxcywh) -> Result<()> {
    if !(b[2] > 0.0 && b[3] > 0.0) {
        return Err(Error::contract(format!(
            "box {b:?} has non-positive extent"
        )));
    }
    Ok(())
}

/// Intersection over union; `0` for disjoint boxes.
pub fn iou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    let [ax1, ay1, ax2, ay2] = to_corners(a);
    let [bx1, by1, bx2, by2] = to_corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU in `(-1, 1]`.
pub fn giou(a: BoxCxcywh, b: BoxCxcywh) -> Result<f64> {
    check_extent(a)?;
    check_extent(b)?;
    Ok(giou_parts(a, b).0)
}

/// GIoU and its gradient with respect to `a`'s `(cx, cy, w, h)`.
pub(crate) fn giou_parts(a: BoxCxcywh, b: BoxCxcywh) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = to_corners(a);
    let [gx1, gy1, gx2, gy2] = to_corners(b);
    let (w, h) = (x2 - x1, y2 - y1);
    let iw_raw = x2.min(gx2) - x1.max(gx1);
    let ih_raw = y2.min(gy2) - y1.max(gy1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = w * h + area(b) - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let hull = cw * ch;
    let value = inter / union - (hull - union) / hull;

    // Partial derivatives with respect to the corners x1, y1, x2, y2.
    let on = |c: bool| if c { 1.0 } else { 0.0 };
    let d_iw = [
        -on(x1 >= gx1 && iw_raw > 0.0),
        on(x2 <= gx2 && iw_raw > 0.0),
    ];
    let d_ih = [
        -on(y1 >= gy1 && ih_raw > 0.0),
        on(y2 <= gy2 && ih_raw > 0.0),
    ];
    let d_inter = [d_iw[0] * ih, d_ih[0] * iw, d_iw[1] * ih, d_ih[1] * iw];
    let d_area = [-h, -w, h, w];
    let d_cw = [-on(x1 <= gx1), on(x2 >= gx2)];
    let d_ch = [-on(y1 <= gy1), on(y2 >= gy2)];
    let d_hull = [d_cw[0] * ch, d_ch[0] * cw, d_cw[1] * ch, d_ch[1] * cw];
    let mut dc = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        dc[i] = d_inter[i] / union - inter * d_union / (union * union) + d_union / hull
            - union * d_hull[i] / (hull * hull);
    }
    // x1 = cx - w/2, x2 = cx + w/2 and likewise for y.
    let grad = [
        dc[0] + dc[2],
        dc[1] + dc[3],
        (dc[2] - dc[0]) / 2.0,
        (dc[3] - dc[1]) / 2.0,
    ];
    (value, grad)
}
