"""
SDF vectors and the inverse deformation field
=============================================

The initial cloud is stored once as a grid of vectors pointing from the
nearest cloud point to each vertex.  A deformed surface is compared with
it by tracing query points back through the inverse deformation field.
"""

import numpy as np

from pbdreg.deformation import build_idf, deformed_sdf
from pbdreg.sdf_grid import GridGeometry, build_initial_sdf, interpolate

xs = np.linspace(0, 0.04, 9)
gx, gy = np.meshgrid(xs, xs)
rest = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
geom = GridGeometry.enveloping(rest, 0.01, 0.02)
sdf = build_initial_sdf(rest, geometry=geom)
print("grid", geom.dims, "vertices", geom.n_vertices)

# 3 mm above the plane the SDF vector points straight up with length 3 mm.
q = np.array([[0.02, 0.02, 0.003]])
print("phi0 above the plane:", interpolate(sdf, q)[0])

# Lift the surface by 5 mm. A point on the lifted surface traces back to
# the rest plane, so its deformed SDF is close to zero...
lifted = rest + (0, 0, 0.005)
idf = build_idf(rest, lifted, geom)
print("deformed SDF on the lifted surface:", deformed_sdf(idf, sdf, lifted[40]))
# ...while the original plane now looks 5 mm *below* the surface.
print("deformed SDF on the old plane:", deformed_sdf(idf, sdf, rest[40]))
