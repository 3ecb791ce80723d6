"""Locality scores recorded on first run: depth 10, k=5, 4096 uniform points from default_rng(seed), seeds 0..9."""

ZORDER_LOCALITY = [
    0.07515842623032096, 0.07709636767375519, 0.07554424826855016, 0.07537169918537955,
    0.07772399440520503, 0.07881005966637174, 0.08163437995789602, 0.07540255493730168,
    0.07555644040227606, 0.0824661623596534,
]
XYZ_LOCALITY = [
    0.0809470797038992, 0.08004747185440567, 0.07986047813186478, 0.07970015693647792,
    0.08135335306321699, 0.07989841318724067, 0.08101812301684158, 0.0811291036123993,
    0.07973927187576275, 0.08038159352498779,
]
