"""3-vector and quaternion algebra generic over scalar type.

Components may be floats, numpy arrays (batched) or tape scalars; all
arithmetic goes through :mod:`tenseg.autodiff`'s dispatching helpers so
the same formulas run raw or recorded.
"""

from . import autodiff as ad


class Vec3:
    __slots__ = ("x", "y", "z")

    def __init__(self, x, y, z):
        self.x = x
        self.y = y
        self.z = z

    def __repr__(self):
        return f"Vec3({self.x!r}, {self.y!r}, {self.z!r})"

    def __add__(self, o):
        return Vec3(self.x + o.x, self.y + o.y, self.z + o.z)

    def __sub__(self, o):
        return Vec3(self.x - o.x, self.y - o.y, self.z - o.z)

    def __neg__(self):
        return Vec3(-self.x, -self.y, -self.z)

    def __mul__(self, s):
        return Vec3(self.x * s, self.y * s, self.z * s)

    __rmul__ = __mul__

    def dot(self, o):
        return ad.dot3((self.x, self.y, self.z), (o.x, o.y, o.z))

    def cross(self, o):
        cx, cy, cz = ad.cross3((self.x, self.y, self.z), (o.x, o.y, o.z))
        return Vec3(cx, cy, cz)

    def norm(self, eps=0.0):
        return ad.norm((self.x, self.y, self.z), eps)

    def values(self):
        return (ad.value_of(self.x), ad.value_of(self.y),
                ad.value_of(self.z))

    @staticmethod
    def zero():
        return Vec3(0.0, 0.0, 0.0)


class Quat:
    """Unit quaternion (w, x, y, z), body-to-world convention."""

    __slots__ = ("w", "x", "y", "z")

    def __init__(self, w, x, y, z):
        self.w = w
        self.x = x
        self.y = y
        self.z = z

    def __repr__(self):
        return f"Quat({self.w!r}, {self.x!r}, {self.y!r}, {self.z!r})"

    def rotate(self, v):
        """Rotate ``v`` from body to world frame."""
        qv = Vec3(self.x, self.y, self.z)
        t = qv.cross(v) * 2.0
        return v + t * self.w + qv.cross(t)

    def rotate_inv(self, v):
        """Rotate ``v`` from world to body frame."""
        qv = Vec3(-self.x, -self.y, -self.z)
        t = qv.cross(v) * 2.0
        return v + t * self.w + qv.cross(t)

    def integrate(self, omega, dt):
        """First-order update q + (dt/2)*(0, omega) ⊗ q, renormalized."""
        hw = -0.5 * dt * (omega.x * self.x + omega.y * self.y
                          + omega.z * self.z)
        hx = 0.5 * dt * (omega.x * self.w + omega.y * self.z
                         - omega.z * self.y)
        hy = 0.5 * dt * (omega.y * self.w + omega.z * self.x
                         - omega.x * self.z)
        hz = 0.5 * dt * (omega.z * self.w + omega.x * self.y
                         - omega.y * self.x)
        w = self.w + hw
        x = self.x + hx
        y = self.y + hy
        z = self.z + hz
        inv = 1.0 / ad.norm((w, x, y, z))
        return Quat(w * inv, x * inv, y * inv, z * inv)

    def values(self):
        return (ad.value_of(self.w), ad.value_of(self.x),
                ad.value_of(self.y), ad.value_of(self.z))

    @staticmethod
    def identity():
        return Quat(1.0, 0.0, 0.0, 0.0)
