"""OpenLoad 测试包"""
