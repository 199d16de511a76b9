"""
Procedural Glyphs for the JointSR Project
5x7 dot-matrix bitmaps for the toy charset, drawn as filled cells with Pillow.
"""

from typing import Dict, Tuple

import numpy as np
from PIL import ImageDraw

GLYPH_ROWS = 7
GLYPH_COLS = 5

GLYPH_BITMAPS: Dict[str, Tuple[str, ...]] = {
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
}


def glyph_mask(char: str) -> np.ndarray:
    """Boolean (7, 5) bitmap of a glyph."""
    try:
        rows = GLYPH_BITMAPS[char]
    except KeyError as e:
        raise KeyError(f"No glyph bitmap for {char!r}") from e
    return np.array([[cell == "#" for cell in row] for row in rows], dtype=bool)


def supported_glyphs() -> str:
    return "".join(GLYPH_BITMAPS)


def draw_glyph(draw: ImageDraw.ImageDraw, char: str, left: float, top: float,
               width: float, height: float, fill: int) -> None:
    """Fill the 'on' cells of ``char`` inside the box (left, top, width, height)."""
    cell_w = width / GLYPH_COLS
    cell_h = height / GLYPH_ROWS
    for row, col in zip(*np.nonzero(glyph_mask(char))):
        x0 = left + col * cell_w
        y0 = top + row * cell_h
        draw.rectangle(
            [int(round(x0)), int(round(y0)), int(round(x0 + cell_w)) - 1, int(round(y0 + cell_h)) - 1],
            fill=fill,
        )
