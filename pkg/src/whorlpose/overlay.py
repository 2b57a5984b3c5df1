"""Annotated section images: keypoints, tip-center-tip polylines and geometry labels."""

from __future__ import annotations

from typing import Sequence

from PIL import Image, ImageDraw, ImageFont

from .detector import RawDetection
from .postprocess import Whorl, WhorlCandidate, convert_to_real_world, whorl_geometry
from .projection import SectionImage

TIP_COLOR = (220, 30, 30)
CENTER_COLOR = (30, 90, 220)
LINE_COLOR = (240, 150, 0)
TEXT_COLOR = (0, 120, 0)
FOOTER_PX = 14
MARKER_R = 4


def _kp_pixels(cand: WhorlCandidate, image: SectionImage) -> list[tuple[float, float]]:
    m = image.meta
    xn, yn = m.world_to_normalized([p[0] for p in cand.kp_world], [p[1] for p in cand.kp_world])
    return [(float(x) * m.width_px, float(y) * m.height_px) for x, y in zip(xn, yn)]


def render_overlay(image: SectionImage, detections: Sequence[RawDetection] = (),
                   whorls: Sequence[Whorl] = (), kp_score_threshold: float = 0.0) -> Image.Image:
    """Draw detections (keypoints + labels) and/or whorl heights over the white composite.

    A footer line identifying the image is always stamped along the bottom edge.
    """
    canvas = Image.fromarray(image.composite(), mode="RGB")
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    m = image.meta

    for det in detections:
        cand = convert_to_real_world(det, m)
        pts = _kp_pixels(cand, image)
        draw.line(pts, fill=LINE_COLOR, width=2)
        for k, (x, y) in enumerate(pts):
            color = CENTER_COLOR if k == 1 else TIP_COLOR
            draw.ellipse([x - MARKER_R, y - MARKER_R, x + MARKER_R, y + MARKER_R], fill=color)
        angle, length = whorl_geometry(cand, kp_score_threshold)
        label = "-" if angle is None else f"{angle:.0f}\N{DEGREE SIGN} {length:.2f} m"
        draw.text((pts[2][0] + 6, pts[1][1] - 6), label, fill=TEXT_COLOR, font=font)

    for w in whorls:
        if not m.z_min <= w.z_m <= m.z_max:
            continue
        _, row = m.world_to_pixel(m.x_min, w.z_m)
        y = int(row)
        draw.line([(0, y), (m.width_px // 8, y)], fill=CENTER_COLOR, width=2)
        parts = [f"z={w.z_m:.2f}"]
        if w.insertion_angle_deg is not None:
            parts.append(f"{w.insertion_angle_deg:.0f}\N{DEGREE SIGN}")
        if w.max_branch_len_m is not None:
            parts.append(f"{w.max_branch_len_m:.2f} m")
        draw.text((m.width_px // 8 + 4, y - 6), " ".join(parts), fill=TEXT_COLOR, font=font)

    n = len(detections) or len(whorls)
    footer = f"{m.tree_id} view {m.view_angle_deg:g} section {m.section_index}  n={n}"
    draw.rectangle([0, m.height_px - FOOTER_PX, m.width_px, m.height_px], fill=(255, 255, 255))
    draw.text((2, m.height_px - FOOTER_PX + 1), footer, fill=(0, 0, 0), font=font)
    return canvas

