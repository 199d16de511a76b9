"""
Synthetic text-line data: vocabulary, glyph bitmaps, rendering, blind degradation
and manifests.
"""
