"""Economic NMPC with Gauss-Newton-like Hessians from storage-function convexification."""
__version__ = "0.1.0"
