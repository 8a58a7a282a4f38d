"""Repository root on sys.path so `scene_completion` imports without installation"""
