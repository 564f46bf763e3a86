__all__ = ['agmnt']
